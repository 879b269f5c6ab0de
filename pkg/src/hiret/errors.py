"""Exception types shared across the engine."""


class HiretError(Exception):
    """Base class for all errors raised by this package."""


class DuplicateDocIdError(HiretError):
    """A knowledge-base ingest stream contained the same doc_id twice."""

    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id: {doc_id!r}")
        self.doc_id = doc_id


class NotFoundError(HiretError):
    """A doc_id, chunk or embedding id was requested but does not exist."""


class DimensionMismatchError(HiretError):
    """Two vectors (or a vector and a store/index) disagree on dimension."""


class FormatError(HiretError):
    """A persisted file failed structural validation (magic, version, truncation, ...)."""


class BudgetError(HiretError):
    """The token budget cannot accommodate the prompt template plus question."""
