"""Error types shared across the package."""


class LineGTError(Exception):
    """Base class for all package-specific errors."""


class MalformedRecord(LineGTError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class IndexOutOfRange(LineGTError):
    pass


class MissingConformer(LineGTError):
    pass


class DegenerateGeometry(LineGTError):
    pass


class EmptyLineGraph(LineGTError):
    pass


class DimensionMismatch(LineGTError):
    pass


class ShapeMismatch(LineGTError):
    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} vs {tuple(shape_b)}")


class NonScalarLoss(LineGTError):
    pass


class EigenNoConvergence(LineGTError):
    pass


class NonFiniteLoss(LineGTError):
    def __init__(self, molecule_ids):
        super().__init__(f"non-finite loss in batch: {molecule_ids}")
        self.molecule_ids = list(molecule_ids)


class DatasetTooSmall(LineGTError):
    pass


class AllLabelsMissing(LineGTError):
    pass


class UndefinedMetric(LineGTError):
    pass


class DegenerateClusters(LineGTError):
    pass
