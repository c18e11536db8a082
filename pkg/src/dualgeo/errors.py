"""Exception hierarchy shared by every dualgeo subsystem."""


class GeoError(Exception):
    """Base class for all dualgeo errors."""


class ValidationError(GeoError):
    """Input data (programs, corpora, knowledge files) failed validation."""


# -- program DSL -------------------------------------------------------------

class ProgramError(ValidationError):
    pass


class UnknownToken(ProgramError):
    pass


class MalformedStep(ProgramError):
    pass


class ExecutionError(ValidationError):
    """A well-formed program could not be executed."""


class DomainError(ExecutionError):
    pass


class DanglingReference(ExecutionError):
    pass


class MissingNumber(ExecutionError):
    pass


class NoMatch(GeoError):
    """No answer choice lies within tolerance of the executed value."""


# -- knowledge base ----------------------------------------------------------

class KnowledgeBaseError(ValidationError):
    pass


class DuplicateConcept(KnowledgeBaseError):
    pass


class EmptyExplanation(KnowledgeBaseError):
    pass


class EmptyKnowledgeBase(KnowledgeBaseError):
    pass


# -- data / model ------------------------------------------------------------

class ProgramValidationError(ValidationError):
    def __init__(self, message, record_ids=()):
        super().__init__(message)
        self.record_ids = list(record_ids)


class SequenceTooLong(ValidationError):
    pass


class LabelMismatch(ValidationError):
    pass


class NonFiniteLoss(GeoError):
    def __init__(self, message, batch_id=None, epoch=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.epoch = epoch


class UsageError(GeoError):
    pass
