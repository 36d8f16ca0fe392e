"""
Module for Exceptions relating to pyactqa
"""


class ActQAException(Exception):
    """
    Base pyactqa exception
    """

    __name__ = "ActQAException"
    exit_code = 2

    def __init__(self, message="Default error message"):
        self.message = message
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}: {self.message}'


class ShapeException(ActQAException):
    """
    Exception to be raised when tensor or layer operands have incompatible shapes
    """

    __name__ = "ShapeException"

    def __init__(self, message="Incompatible shapes", operands=None):
        self.message = message
        self.operands = operands
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({self.operands}): {self.message}'


class NumericalException(ActQAException):
    """
    Exception to be raised when a computation produces non-finite values or cannot be solved
    """

    __name__ = "NumericalException"
    exit_code = 3

    def __init__(self, message="Numerical failure", obj=None):
        self.message = message
        self.obj = obj
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({self.obj}): {self.message}'


class ConfigurationException(ActQAException):
    """
    Exception to be raised when a model, training or QA configuration is invalid
    """

    __name__ = "ConfigurationException"

    def __init__(self, message="Invalid configuration", target=None):
        self.message = message
        self.target = target
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({self.target}): {self.message}'


class ValidationException(ActQAException):
    """
    Exception to be raised when input data (corpora, questions, word vectors) violates its schema
    """

    __name__ = "ValidationException"

    def __init__(self, message="Invalid data", obj=None):
        self.message = message
        self.obj = obj
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({self.obj}): {self.message}'


class FileException(ActQAException):
    """
    Exception to be raised when an error occurs with file handling
    """

    __name__ = "FileException"

    def __init__(self, message="Error loading file", file=None):
        self.message = message
        self.file = file
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({self.file}): {self.message}'


class SerializerException(ActQAException):
    """
    Exception to be raised when an error occurs serializing/deserializing a checkpoint
    """

    __name__ = "SerializerException"

    def __init__(self, message="Error serializing object", obj=None):
        self.message = message
        self.obj = obj
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({str(self.obj)}): {self.message}'


class RegistrationException(ActQAException):
    """
    Exception to be raised when a key is missing from, or cannot be added to, a registry
    """

    __name__ = "RegistrationException"

    def __init__(self, message="Error registering entry", target=None):
        self.message = message
        self.target = target
        super().__init__(self.message)

    def __str__(self):
        return f'{self.__name__}({str(self.target)}): {self.message}'
