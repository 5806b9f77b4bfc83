"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ContractError -> 1, ConfigError -> 2.
"""


class DiscgenError(Exception):
    pass


class ContractError(DiscgenError):
    """A caller violated an operation's contract (shapes, ranges, state)."""


class DimensionError(ContractError):
    """Shape mismatch; message names the op and the offending shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class UnsupportedOpError(ContractError):
    def __init__(self, kind: str):
        super().__init__(f"unsupported op kind: {kind!r}")
        self.kind = kind


class ConfigError(DiscgenError):
    """Invalid or unrealizable configuration."""


class FormatError(DiscgenError):
    """Malformed serialized artifact; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
