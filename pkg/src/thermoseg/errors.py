"""Exception hierarchy.

ValidationError covers bad inputs detected before compute starts (CLI exit
code 2); ComputeError covers failures during numeric work (exit code 3).
"""


class ThermosegError(Exception):
    pass


class ValidationError(ThermosegError):
    pass


class ComputeError(ThermosegError):
    pass
