"""
统一异常定义

每个异常携带稳定的字符串错误码 error_code 和命令行退出码 exit_code，
命令行层据此构造错误报告。
"""
from typing import Optional


class SeqPoolError(Exception):
    """所有库异常的基类"""

    error_code = 'SEQPOOL_ERROR'
    exit_code = 1

    def __init__(self, message: str = '', **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        result = {'errorCode': self.error_code, 'errorMsg': self.message}
        if self.details:
            result['details'] = self.details
        return result


# ==========================================
# 序列窗口校验错误
# ==========================================

class ValidationError(SeqPoolError):
    error_code = 'INVALID_WINDOW'
    exit_code = 3


class EmptyWindow(ValidationError):
    error_code = 'EMPTY_WINDOW'


class UnsortedFrames(ValidationError):
    error_code = 'UNSORTED_FRAMES'


class MaskLengthMismatch(ValidationError):
    error_code = 'MASK_LENGTH_MISMATCH'


class NonFiniteValue(ValidationError):
    error_code = 'NON_FINITE_VALUE'


# ==========================================
# 参数 / 形状错误
# ==========================================

class DomainError(SeqPoolError):
    error_code = 'DOMAIN_ERROR'
    exit_code = 3


class MissingMask(SeqPoolError):
    error_code = 'MISSING_MASK'
    exit_code = 3


class MissingGrid(SeqPoolError):
    error_code = 'MISSING_GRID'


class WidthMismatch(SeqPoolError):
    error_code = 'WIDTH_MISMATCH'


class ShapeMismatch(SeqPoolError):
    error_code = 'SHAPE_MISMATCH'


class EmptySequence(SeqPoolError):
    error_code = 'EMPTY_SEQUENCE'


class AlignmentMismatch(SeqPoolError):
    error_code = 'ALIGNMENT_MISMATCH'


# ==========================================
# 配置 / IO 错误
# ==========================================

class ConfigError(SeqPoolError):
    error_code = 'CONFIG_ERROR'
    exit_code = 3

    def __init__(self, message: str = '', line: Optional[int] = None,
                 column: Optional[int] = None, **details):
        if line is not None:
            details['line'] = line
            details['column'] = column
        super().__init__(message, **details)
        self.line = line
        self.column = column


class IoError(SeqPoolError):
    error_code = 'IO_ERROR'
    exit_code = 4


# 校验不一致（cmd_verify 专用退出码）
VERIFY_MISMATCH_EXIT_CODE = 2
