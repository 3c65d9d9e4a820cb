#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
错误类型定义
全部继承 ValueError：服务层抛出，CLI 转换为单行错误输出，API 转换为 400
"""


class PropFlowError(ValueError):
    """所有业务错误的基类"""

    code = "PropFlowError"

    def one_line(self) -> str:
        """机器可解析的单行错误描述"""
        message = " ".join(str(self).split())
        return f"error={self.code} message={message}"


class InvalidBox(PropFlowError):
    code = "InvalidBox"


class RegionOutsideImage(PropFlowError):
    code = "RegionOutsideImage"


class DescriptorMismatch(PropFlowError):
    code = "DescriptorMismatch"


class NegativeFeature(PropFlowError):
    code = "NegativeFeature"


class EmptyProposalSet(PropFlowError):
    code = "EmptyProposalSet"


class EmptyInput(PropFlowError):
    code = "EmptyInput"


class NoValidFlow(PropFlowError):
    code = "NoValidFlow"


class DegenerateControlPoints(PropFlowError):
    code = "DegenerateControlPoints"


class DegenerateGt(PropFlowError):
    code = "DegenerateGt"


class MissingGt(PropFlowError):
    code = "MissingGt"


class KeypointOutsideImage(PropFlowError):
    code = "KeypointOutsideImage"


class TooFewKeypoints(PropFlowError):
    code = "TooFewKeypoints"


class ConfigError(PropFlowError):
    code = "ConfigError"


class FormatError(PropFlowError):
    code = "FormatError"
