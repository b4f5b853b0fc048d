# core/exceptions.py


class PopSynthError(RuntimeError):
    """
    Base class for every domain error raised by the synthesis apps.

    The management command maps these to exit code 1; anything else is a bug.
    """
    pass
