# 命令行入口
from seqpool.views import cli

# python run.py <gen|verify|bench|recall|run> ...
if __name__ == '__main__':
    cli()
