"""Exception hierarchy shared by all modules."""


class RobustFDPError(Exception):
    """Base class for errors raised by robust_fdp."""


class InvalidArgumentError(RobustFDPError, ValueError):
    pass


class RankDeficientDesignError(RobustFDPError):
    """The design matrix G has a singular Gram matrix G^T G."""


class DegenerateScaleError(RobustFDPError):
    """Too few residuals fall inside [-tau, tau]; tau should be increased."""


class DegenerateDataError(RobustFDPError):
    """The data cannot support a positive variance estimate."""


class InsufficientDataError(RobustFDPError, ValueError):
    pass
