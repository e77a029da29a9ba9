from .config import config
from .solver_defaults import get_default, get_section, validate_solver_defaults

__all__ = ['config', 'get_default', 'get_section', 'validate_solver_defaults']
