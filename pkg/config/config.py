"""
Process-level configuration for the mean-field control solver.
Loads settings from environment variables and an optional .env file.
"""
import os
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv


class Config:
    """Environment-backed settings shared by the CLI and the runner"""

    def __init__(self):
        self.base_dir = Path(__file__).parent.parent
        self._load_env()

    def _load_env(self):
        """Load environment variables from .env file if it exists"""
        env_file = self.base_dir / ".env"
        if env_file.exists():
            load_dotenv(env_file, override=False)

    @property
    def threads(self) -> Optional[int]:
        """Worker cap for parallel probe evaluation (MFC_THREADS)"""
        value = os.getenv('MFC_THREADS')
        if not value:
            return None
        try:
            return max(1, int(value))
        except ValueError:
            return None

    @property
    def default_seed(self) -> int:
        """Seed used when neither the config file nor --seed gives one"""
        return int(os.getenv('MFC_SEED', '0'))

    @property
    def output_dir(self) -> str:
        """Default directory for run artifacts"""
        return os.getenv('MFC_OUTPUT_DIR', str(self.base_dir / 'runs'))

    @property
    def log_level(self) -> str:
        """Root log level for the entry script"""
        return os.getenv('MFC_LOG_LEVEL', 'INFO').upper()

    @property
    def log_to_file(self) -> bool:
        """Mirror logs to mfc-run.log"""
        return os.getenv('LOG_TO_FILE', 'false').lower() in ('true', '1', 'yes', 'on')

    def validate(self) -> Dict[str, bool]:
        """Validate that the environment settings are usable"""
        raw_threads = os.getenv('MFC_THREADS')
        return {
            'threads': raw_threads is None or self.threads is not None,
            'log_level': self.log_level in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'),
            'output_dir': bool(self.output_dir),
        }

    def __repr__(self) -> str:
        validation = self.validate()
        return f"Config(validated={all(validation.values())}, checks={validation})"


# Global config instance
config = Config()
