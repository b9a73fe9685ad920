from enum import Enum


class ForecasterKind(str, Enum):
    OLS = "ols"
    DLINEAR = "dlinear"
    MLP = "mlp"


class Method(str, Enum):
    FROZEN = "frozen"
    DENSE_MSE = "dense_mse"
    PETSA = "petsa"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class LossKind(str, Enum):
    PETSA = "petsa"
    HUBER = "huber"
    MSE = "mse"


class LossMode(str, Enum):
    PARTIAL = "partial"
    TOTAL = "total"


class Part(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Side(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


class SweepAxis(str, Enum):
    BETA = "beta"
    RANK = "rank"
    ALPHA0 = "alpha0"
    LOSS = "loss"
