"""Exception types shared across the package."""


class ProbeSQLError(Exception):
    pass


class MalformedSchema(ProbeSQLError):
    pass


class DuplicateName(MalformedSchema):
    pass


class UnresolvedRef(ProbeSQLError):
    pass


class BackendUnavailable(ProbeSQLError):
    pass


class ScriptExhausted(ProbeSQLError):
    pass


class OutputTruncated(ProbeSQLError):
    def __init__(self, message: str, response=None):
        super().__init__(message)
        self.response = response


class ParseFailure(ProbeSQLError):
    pass


class GoldExecutionFailure(ProbeSQLError):
    pass


class ConfigError(ProbeSQLError):
    pass
