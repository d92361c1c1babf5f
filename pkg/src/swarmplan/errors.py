"""Exception types shared across the package."""


class SwarmPlanError(Exception):
    """Base class for all swarmplan errors."""


class ModelDomainError(SwarmPlanError):
    """Dynamics input outside the model domain (non-finite values, h <= 0)."""


class ConfigError(SwarmPlanError):
    """Invalid parameter set or engine configuration."""


class DegenerateGeometryError(SwarmPlanError):
    """Coincident predicted positions: the constraint normal is undefined."""


class SolverError(SwarmPlanError):
    """QP solver rejected its input (bad dimensions, H not positive definite)."""


class GenerationError(SwarmPlanError):
    """Random scenario generation failed (infeasible packing or retry budget)."""


class SchemaError(SwarmPlanError):
    """Malformed scenario file, config file, or trajectory CSV."""
