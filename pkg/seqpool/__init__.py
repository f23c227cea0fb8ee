import logging
import sys

import config

__version__ = '0.3.0'

# 配置日志输出到 stderr（stdout 留给机器可读的报告）
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s [%(levelname)s] %(message)s',
    handlers=[logging.StreamHandler(sys.stderr)]
)
# 确保 'log' logger 也输出
logger = logging.getLogger('log')
logger.setLevel(getattr(logging, config.LOG_LEVEL.upper(), logging.INFO))
