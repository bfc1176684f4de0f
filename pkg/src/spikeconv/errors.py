"""Exception hierarchy shared by the toolchain."""


class SpikeConvError(Exception):
    """Base class for all toolchain errors."""


class ModelError(SpikeConvError):
    """A model manifest, blob or in-memory model is invalid."""


class UnknownLayerError(ModelError):
    """The manifest names a layer kind the model format does not know."""


class ShapeError(ModelError):
    """Layer shapes do not chain, or a tensor has the wrong size."""


class NonFiniteParameterError(ModelError):
    pass


class UnconvertibleLayerError(SpikeConvError):
    """A known layer kind has no rewrite rule onto the supported set."""

    def __init__(self, index: int, kind: str, name: str = ""):
        self.index = index
        self.kind = kind
        self.name = name
        label = f"{name!r} " if name else ""
        super().__init__(f"unconvertible layer {label}at index {index}: {kind}")


class DegenerateLayerError(SpikeConvError):
    pass


class UnpartitionableLayerError(SpikeConvError):
    def __init__(self, layer: str, reason: str):
        self.layer = layer
        self.reason = reason
        super().__init__(f"unpartitionable layer {layer!r}: {reason}")
