"""Operator and leaf catalog shared by the genome and the autodiff core."""

from __future__ import annotations

import enum


class ShapeRule(enum.Enum):
    SAME = "same"
    SINGLE = "single"
    CONSTANT = "constant"
    MAXIMUM = "maximum"


class OperatorKind(enum.Enum):
    """The 15 computation-node operators.

    Each member carries ``arity``, ``shape_rule``, ``has_params`` and
    ``needs_vector`` (the input must be a vector for the node to be feasible).
    """

    NEG = ("Neg", 1, ShapeRule.SAME, False, False)
    ABS = ("Abs", 1, ShapeRule.SAME, False, False)
    INV = ("Inv", 1, ShapeRule.SAME, False, False)
    SQUARE = ("Square", 1, ShapeRule.SAME, False, False)
    SQRT = ("Sqrt", 1, ShapeRule.SAME, False, False)
    TANH = ("Tanh", 1, ShapeRule.SAME, False, False)
    SIGMOID = ("Sigmoid", 1, ShapeRule.SAME, False, False)
    SOFTPLUS = ("Softplus", 1, ShapeRule.SAME, False, False)
    SUM = ("Sum", 1, ShapeRule.SINGLE, False, True)
    MEAN = ("Mean", 1, ShapeRule.SINGLE, False, True)
    FFN = ("FFN", 1, ShapeRule.SINGLE, True, True)
    FFN_D = ("FFN_D", 1, ShapeRule.CONSTANT, True, True)
    ADD = ("Add", 2, ShapeRule.MAXIMUM, False, False)
    MUL = ("Mul", 2, ShapeRule.MAXIMUM, False, False)
    CONCAT = ("Concat", 2, ShapeRule.CONSTANT, True, True)

    def __init__(self, label, arity, shape_rule, has_params, needs_vector):
        self.label = label
        self.arity = arity
        self.shape_rule = shape_rule
        self.has_params = has_params
        self.needs_vector = needs_vector

    @property
    def commutative(self) -> bool:
        return self in (OperatorKind.ADD, OperatorKind.MUL)

    @classmethod
    def from_label(cls, label: str) -> "OperatorKind":
        try:
            return _BY_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown operator {label!r}") from None

    def __repr__(self):
        return self.label


_BY_LABEL = {k.label: k for k in OperatorKind}

ALL_OPERATORS = tuple(OperatorKind)
UNARY_OPERATORS = tuple(k for k in OperatorKind if k.arity == 1)
BINARY_OPERATORS = tuple(k for k in OperatorKind if k.arity == 2)
# Replacement pools used by repair: operators that accept any input shape.
SHAPE_FREE_UNARY = tuple(k for k in UNARY_OPERATORS if k.shape_rule is ShapeRule.SAME)
SHAPE_FREE_BINARY = (OperatorKind.ADD, OperatorKind.MUL)


class LeafKind(enum.Enum):
    H_S = "H_S"  # student embedding row
    H_E = "H_E"  # exercise embedding row
    H_C = "H_C"  # exercise's Q-matrix row

    def __repr__(self):
        return self.value


ALL_LEAVES = tuple(LeafKind)
