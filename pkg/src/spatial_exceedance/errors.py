"""Exception hierarchy shared by the pipeline and the command-line front end."""


class PipelineError(Exception):
    """Base class for every error raised deliberately by this package."""


class InputError(PipelineError, ValueError):
    """Malformed or inconsistent input data (files, geometries, configuration)."""


class GeometryError(InputError):
    pass


class EmptyFeatureError(InputError):
    pass


class UncoveredSiteError(InputError):
    def __init__(self, site_id):
        self.site_id = site_id
        super().__init__(f"site {site_id!r} has no grid point inside it or within 20 m of its boundary")


class UnassignedSiteError(InputError):
    def __init__(self, site_id):
        self.site_id = site_id
        super().__init__(f"site {site_id!r} has its centroid outside every region")


class DegenerateOutcomeError(InputError):
    pass


class ConvergenceError(PipelineError):
    """Raised when a fit fails the R-hat gate and the caller did not force output."""

    def __init__(self, offenders):
        self.offenders = dict(offenders)
        listing = ", ".join(f"{k}={v:.3f}" for k, v in self.offenders.items())
        super().__init__(f"fixed effects failed the convergence gate: {listing}")
