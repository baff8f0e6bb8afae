"""Exception hierarchy shared by all tpsc modules."""


class TpscError(Exception):
    """Base class for every error raised by tpsc."""


class ChunkFormatError(TpscError, ValueError):
    """A chunk violates one of its invariants; ``field`` names which one."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"invalid chunk field `{field}`" + (f": {detail}" if detail else ""))


class ChunkParseError(TpscError, ValueError):
    pass


class BadMagic(ChunkParseError):
    def __init__(self, found: bytes):
        self.found = found
        super().__init__(f"bad magic {found!r}, expected b'TPC1'")


class UnsupportedVersion(ChunkParseError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"unsupported chunk version {version}")


class Truncated(ChunkParseError):
    def __init__(self, got: int, need: int):
        self.got, self.need = got, need
        super().__init__(f"truncated chunk: {got} bytes, need {need}")


class RecordCountMismatch(ChunkParseError):
    def __init__(self, declared: int, found: float):
        self.declared, self.found = declared, found
        super().__init__(f"header declares {declared} records, payload holds {found}")


class NonFiniteValue(ChunkParseError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"record {index} carries a non-finite value")


class ChainError(TpscError):
    """Chain construction violated the genesis/link rule."""


class LineRejected(TpscError, ValueError):
    """A line-protocol line could not be parsed."""


class JournalCorrupt(TpscError):
    def __init__(self, offset: int, detail: str):
        self.offset = offset
        super().__init__(f"journal corrupt at byte offset {offset}: {detail}")


class StoreError(TpscError):
    pass


class ObjectNotFound(StoreError, KeyError):
    def __init__(self, address: str):
        self.address = address
        super().__init__(f"object not found: {address}")

    def __str__(self) -> str:
        return self.args[0]


class CorruptObject(StoreError):
    def __init__(self, address: str, actual: str):
        self.address, self.actual = address, actual
        super().__init__(f"object {address} is corrupt (content hashes to {actual})")


class StamperError(TpscError):
    pass


class UnknownHash(StamperError):
    def __init__(self, hash_hex: str):
        self.hash_hex = hash_hex
        super().__init__(f"hash was never submitted: {hash_hex}")


class ServiceUnavailable(StamperError):
    """Network-level failure talking to a remote service; retryable."""


class ManifestError(TpscError, ValueError):
    pass


class ConfigError(TpscError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class BundleError(TpscError):
    pass


class MissingMember(BundleError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"bundle is missing member {name}")


class AddressMismatch(BundleError):
    def __init__(self, address: str, actual: str):
        self.address, self.actual = address, actual
        super().__init__(f"bundle object {address} hashes to {actual}")


class DatasetError(TpscError):
    pass
