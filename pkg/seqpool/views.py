"""
命令行入口
所有子命令定义: gen / verify / bench / recall / run
"""
import functools
import logging
import os
import sys

import click

import config
from seqpool import __version__, dao
from seqpool.response import (
    RunManifest, ensure_dir, make_err_response, make_error_from, make_succ_response, write_csv, write_manifest
)
from seqpool.services.feature_encoding import EncoderWeights
from seqpool.services.pipeline import run_pipeline, verify_pooling
from seqpool.services.region_network import NetworkConfig, NetworkWeights
from seqpool.services.scene_sim import SPEED_CLASSES, generate, recall_experiment
from seqpool.services.voxel_pooling import BenchReport, bench_pooling
from seqpool.utils.errors import ConfigError, MissingMask, SeqPoolError, VERIFY_MISMATCH_EXIT_CODE

logger = logging.getLogger('log')

VERIFY_FILE = 'verify.json'
BENCH_FILE = 'bench.csv'
RECALL_FILE = 'recall.csv'
RECALL_SPEED_FILE = 'recall_speed_class.csv'
RUN_FILE = 'run.json'
POOLED_FILE = 'pooled.json'
RECALL_REPORT_FILE = 'recall.json'

# 非库异常统一按内部错误上报
INTERNAL_ERROR_CODE = 'INTERNAL_ERROR'
INTERNAL_ERROR_EXIT_CODE = 1


def reported(command: str):
    """
    统一处理报告与退出码

    被装饰函数签名为 fn(manifest, **options)，返回 (data, exit_code)。
    库异常转为错误信封并按异常的 exit_code 退出；其余异常按 INTERNAL_ERROR 上报，退出码 1。
    成功与失败都写一份 manifest。
    """
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(**options):
            out = options['out']
            manifest = RunManifest(command, dict(options), seed=options.get('seed'))
            try:
                data, exit_code = fn(manifest, **options)
            except SeqPoolError as e:
                logger.error(f"[Cli] {command} 失败: {e.error_code} {e.message}")
                click.echo(make_error_from(e))
                manifest.finish(e.exit_code)
                _write_manifest_quietly(out, manifest)
                sys.exit(e.exit_code)
            except Exception as e:
                logger.error(f"[Cli] {command} 内部错误: {e!r}", exc_info=True)
                click.echo(make_err_response(f'内部错误: {e!r}', error_code=INTERNAL_ERROR_CODE))
                manifest.finish(INTERNAL_ERROR_EXIT_CODE)
                _write_manifest_quietly(out, manifest)
                sys.exit(INTERNAL_ERROR_EXIT_CODE)

            manifest.finish(exit_code)
            write_manifest(out, manifest)
            if exit_code == 0:
                click.echo(make_succ_response(data))
            else:
                click.echo(make_err_response('池化校验不一致', error_code='VERIFY_MISMATCH', details=data))
                sys.exit(exit_code)
        return wrapper
    return decorator


def _write_manifest_quietly(out: str, manifest: RunManifest):
    try:
        write_manifest(out, manifest)
    except SeqPoolError as e:
        logger.warning(f"[Cli] manifest 写入失败: {e.message}")


def _dump_pooled(out: str, manifest: RunManifest, pooled):
    records = [record for p in pooled for record in p.dump_records()]
    dao.write_json(os.path.join(out, POOLED_FILE), records)
    manifest.add_output(POOLED_FILE)
    logger.info(f"[Cli] 导出 {len(records)} 条池化记录")


def _pooling_options(fn):
    """verify / run 共用的池化参数"""
    fn = click.option('--dump-pooled', is_flag=True, help='调试: 导出每个 (proposal, 帧) 的采样点与 mask')(fn)
    fn = click.option('--points-per-voxel', 'k', type=int, default=config.POINTS_PER_VOXEL,
                      show_default=True, help='每个体素保留的点数 k')(fn)
    fn = click.option('--voxel-size', 'v', type=float, default=config.VOXEL_SIZE,
                      show_default=True, help='体素边长 v（米）')(fn)
    fn = click.option('--gamma', type=float, default=config.GAMMA, show_default=True,
                      help='区域直径逐帧放大系数')(fn)
    fn = click.option('--seed', type=int, default=config.SEED, show_default=True)(fn)
    fn = click.option('--workers', type=int, default=config.WORKERS, show_default=True)(fn)
    return fn


@click.group()
@click.version_option(version=__version__)
def cli():
    """多帧点云区域池化实验工具"""


# ==========================================
# 场景生成
# ==========================================

@cli.command('gen')
@click.argument('config_path', type=click.Path(dir_okay=False))
@click.option('--out', required=True, type=click.Path(file_okay=False), help='场景输出目录')
@reported('gen')
def cmd_gen(manifest, config_path, out):
    """按场景配置生成合成点云序列"""
    scene_config = dao.read_scene_config(config_path)
    manifest.params['scene_config'] = scene_config.to_dict()
    manifest.seed = scene_config.seed

    scene = generate(scene_config)
    for name in dao.save_scene(scene, out):
        manifest.add_output(name)
    dao.write_json(os.path.join(out, dao.SCENE_CONFIG_FILE), scene_config.to_dict())
    manifest.add_output(dao.SCENE_CONFIG_FILE)

    return {
        'out': out,
        'frames': len(scene.window),
        'points': sum(f.num_points for f in scene.window.frames),
        'proposals': len(scene.proposals),
    }, 0


# ==========================================
# 池化校验
# ==========================================

@cli.command('verify')
@click.argument('scene_dir', type=click.Path(file_okay=False))
@click.option('--points-per-proposal', 'K', type=int, default=config.POINTS_PER_PROPOSAL, show_default=True)
@_pooling_options
@click.option('--out', required=True, type=click.Path(file_okay=False))
@reported('verify')
def cmd_verify(manifest, scene_dir, K, seed, gamma, v, k, workers, dump_pooled, out):
    """朴素池化与体素池化逐项比对，不一致时退出码为 2"""
    ensure_dir(out)
    scene = dao.load_scene(scene_dir)
    report = verify_pooling(scene.window, scene.proposals, gamma, K, v, k, seed, workers)
    data = report.to_dict()
    dao.write_json(os.path.join(out, VERIFY_FILE), data)
    manifest.add_output(VERIFY_FILE)
    if dump_pooled:
        _dump_pooled(out, manifest, report.pooled)

    summary = {key: value for key, value in data.items() if key != 'checks'}
    if not report.passed:
        logger.error(f"[Cli] 池化校验不一致: {summary}")
        return summary, VERIFY_MISMATCH_EXIT_CODE
    return summary, 0


# ==========================================
# 延迟基准
# ==========================================

@cli.command('bench')
@click.option('--size', 'sizes', type=int, multiple=True, default=(168000, 674000, 1382000),
              show_default=True, help='总点数 N，可重复')
@click.option('--proposals', 'M', type=int, default=128, show_default=True)
@click.option('--points-per-proposal', 'K', type=int, default=config.POINTS_PER_PROPOSAL, show_default=True)
@click.option('--reps', type=int, default=5, show_default=True)
@click.option('--frames', type=int, default=1, show_default=True, help='N 个点平均分配到的帧数')
@click.option('--voxel-size', 'v', type=float, default=config.VOXEL_SIZE, show_default=True)
@click.option('--points-per-voxel', 'k', type=int, default=config.POINTS_PER_VOXEL, show_default=True)
@click.option('--seed', type=int, default=config.SEED, show_default=True)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@reported('bench')
def cmd_bench(manifest, sizes, M, K, reps, frames, v, k, seed, out):
    """朴素池化与体素池化的延迟对比"""
    report = bench_pooling(list(sizes), M, reps, K=K, num_frames=frames, v=v, k=k, seed=seed)
    records = report.to_records()
    ensure_dir(out)
    write_csv(os.path.join(out, BENCH_FILE), BenchReport.COLUMNS, records)
    manifest.add_output(BENCH_FILE)
    return {'rows': records, 'slope_fit': report.slope_fit if records and len(set(sizes)) > 1 else None}, 0


# ==========================================
# 召回实验
# ==========================================

@cli.command('recall')
@click.argument('scene_dir', type=click.Path(file_okay=False))
@click.option('--gamma', 'gammas', type=float, multiple=True, default=(1.0, 1.1), show_default=True)
@click.option('--frames', 'lengths', type=int, multiple=True, help='窗口长度 T，可重复；默认取全部帧')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@reported('recall')
def cmd_recall(manifest, scene_dir, gammas, lengths, out):
    """各 (gamma, T) 组合下的前景点召回率"""
    scene = dao.load_scene(scene_dir)
    if not scene.has_masks:
        raise MissingMask(f'场景没有前景掩码: {scene_dir}')
    lengths = list(lengths) or [len(scene.window)]
    table = recall_experiment(scene.to_generated(), list(gammas), lengths)

    ensure_dir(out)
    overall = table.overall_records()
    write_csv(os.path.join(out, RECALL_FILE), ['gamma'] + [f'T={n}' for n in sorted(set(lengths))], overall)
    manifest.add_output(RECALL_FILE)
    dao.write_json(os.path.join(out, RECALL_REPORT_FILE), table.to_dict())
    manifest.add_output(RECALL_REPORT_FILE)
    by_class = table.speed_class_records()
    if scene.labels:
        write_csv(os.path.join(out, RECALL_SPEED_FILE), ['gamma', 'T'] + list(SPEED_CLASSES), by_class)
        manifest.add_output(RECALL_SPEED_FILE)
    else:
        logger.warning('[Cli] 场景没有逐点物体标签，跳过分速度类别统计')
    return {'overall': overall, 'by_speed_class': by_class if scene.labels else []}, 0


# ==========================================
# 完整前向
# ==========================================

def resolve_network_config(path, K, D, H, blocks) -> NetworkConfig:
    """配置文件 < 命令行参数；两者都没有时取 config.py 默认值"""
    data = dao.read_json(path) if path else {}
    if not isinstance(data, dict):
        raise ConfigError(f'网络配置必须是 JSON 对象: {path}')
    overrides = {'K': K, 'D': D, 'H': H, 'num_blocks': blocks}
    data = {**data, **{name: value for name, value in overrides.items() if value is not None}}
    data.setdefault('K', config.POINTS_PER_PROPOSAL)
    data.setdefault('D', config.FEATURE_DIM)
    data.setdefault('H', config.NUM_HEADS)
    data.setdefault('num_blocks', config.NUM_BLOCKS)
    try:
        return NetworkConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(f'网络配置字段错误: {e}', path=path)


@cli.command('run')
@click.argument('scene_dir', type=click.Path(file_okay=False))
@click.option('--weights', type=click.Path(dir_okay=False), help='权重 JSON；缺省使用种子化默认权重')
@click.option('--network-config', type=click.Path(dir_okay=False), help='网络结构 JSON（K/D/H/消融开关）')
@click.option('--points-per-proposal', 'K', type=int, default=None)
@click.option('--feature-dim', 'D', type=int, default=None)
@click.option('--num-heads', 'H', type=int, default=None)
@click.option('--num-blocks', 'blocks', type=int, default=None)
@click.option('--alpha', type=float, default=config.LOSS_ALPHA, show_default=True, help='回归损失权重')
@click.option('--permute-points', is_flag=True, help='调试: 打乱每个池化帧内的点顺序')
@_pooling_options
@click.option('--out', required=True, type=click.Path(file_okay=False))
@reported('run')
def cmd_run(manifest, scene_dir, weights, network_config, K, D, H, blocks, alpha, permute_points,
            seed, gamma, v, k, workers, dump_pooled, out):
    """传播 -> 池化 -> 编码 -> 区域网络，输出每个 proposal 的置信度与框残差"""
    scene = dao.load_scene(scene_dir)
    net_config = resolve_network_config(network_config, K, D, H, blocks)
    T = scene.window.current_index

    if weights:
        encoder = dao.read_encoder_weights(weights)
        network = dao.read_network_weights(weights) or NetworkWeights.default(net_config, T, seed)
    else:
        encoder = EncoderWeights.default(net_config.feature_dim, seed)
        network = NetworkWeights.default(net_config, T, seed)

    truths = None
    current_truth = scene.truth_boxes.get(T)
    if scene.has_masks and current_truth is not None:
        if len(current_truth) == len(scene.proposals):
            truths = current_truth
        else:
            logger.warning(f"[Cli] 真值框数 {len(current_truth)} 与 proposal 数 {len(scene.proposals)} 不一致，不计算损失")

    result = run_pipeline(scene.window, scene.proposals, encoder, network, net_config, gamma, v, k, seed,
                          truths=truths, alpha=alpha, workers=workers,
                          permutation_seed=seed if permute_points else None)
    data = result.to_dict()
    ensure_dir(out)
    dao.write_json(os.path.join(out, RUN_FILE), data)
    manifest.add_output(RUN_FILE)
    if dump_pooled:
        _dump_pooled(out, manifest, result.pooled)
    manifest.extra['timings_ms'] = result.timings_ms
    manifest.params['network'] = net_config.to_dict()

    return {
        'T': result.num_frames,
        'proposals': len(result.outputs),
        'confidence': [o.confidence for o in result.outputs],
        'loss': result.loss,
    }, 0
