import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a config file violates the settings schema."""


class SettingsManager:
    """
    Manages pipeline settings, loading from a JSON or key=value file.
    """

    DEFAULT_SETTINGS = {
        "seed": 0,
        # Data preparation
        "smoothing": True,
        "modeled_sources": ["modeled", "model", "estimate_model"],
        "train_cutoff": 2009,  # First held-out year
        "validation_years": 10,  # Trailing origin years kept for early stopping
        "l_enc": 24,
        "l_pred": 15,
        "augment_threshold": 1.3,  # Births per woman
        "augment_windows": 10,
        "noise_sigma": 0.01,  # In standardized units
        # Model
        "d_emb": 8,
        "hidden_dim": 64,
        "n_layers": 2,
        # Training
        "learning_rate": 1e-3,
        "batch_size": 64,
        "weight_decay": 1e-5,
        "max_epochs": 100,
        "patience": 8,
        "lr_step_size": 10,
        "lr_gamma": 0.5,
        "tf_decay_epochs": 20,
        "members": 10,
        "search_budget": 0,  # 0 disables random search
        # Projection
        "end_year": 2040,
        # Execution
        "jobs": 1,
        "cache_dir": None,
    }

    def __init__(self, settings_filepath: Optional[str] = None):
        """
        Initializes the SettingsManager.

        Args:
            settings_filepath: Config file to load. When None, ``settings.json``
                in the user's config directory is used if it exists.
        """
        self.settings_filepath = settings_filepath or self._get_settings_filepath(
            "settings.json"
        )
        self.settings = self.DEFAULT_SETTINGS.copy()
        self.load_settings(required=settings_filepath is not None)

    def _get_settings_filepath(self, filename: str) -> str:
        """
        Determines the default path for the settings file in the user-specific
        config directory.
        """
        if os.name == "nt":
            app_data_dir = os.getenv("APPDATA") or os.path.expanduser("~")
            config_dir = os.path.join(app_data_dir, "tfrcast")
        else:
            xdg_config_home = os.getenv("XDG_CONFIG_HOME")
            if xdg_config_home:
                config_dir = os.path.join(xdg_config_home, "tfrcast")
            else:
                config_dir = os.path.join(os.path.expanduser("~"), ".config", "tfrcast")
        return os.path.join(config_dir, filename)

    def load_settings(self, required: bool = False):
        """
        Loads settings from the config file and merges them over the defaults.

        Args:
            required: Raise FileNotFoundError instead of falling back to defaults
                when the file does not exist.
        """
        if not os.path.exists(self.settings_filepath):
            if required:
                raise FileNotFoundError(f"Config file not found: {self.settings_filepath}")
            logger.debug(
                "No settings file at %s, using defaults", self.settings_filepath
            )
            self.settings = self.DEFAULT_SETTINGS.copy()
            return

        with open(self.settings_filepath, "r", encoding="utf-8") as f:
            text = f.read()

        if self.settings_filepath.endswith(".json"):
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(
                    f"Could not decode JSON from {self.settings_filepath}: {e}"
                )
            if not isinstance(loaded, dict):
                raise ConfigError(f"{self.settings_filepath}: top level must be an object")
        else:
            loaded = self._parse_key_values(text)

        merged = self.DEFAULT_SETTINGS.copy()
        for key, value in loaded.items():
            merged[key] = self._coerce(key, value)
        self.settings = merged

    def _parse_key_values(self, text: str) -> Dict[str, str]:
        """Parses ``key=value`` lines; blank lines and ``#`` comments are skipped."""
        values = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{self.settings_filepath}:{line_no}: expected key=value, got {line!r}"
                )
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        return values

    def _coerce(self, key: str, value: Any) -> Any:
        """Converts a loaded value to the type of the key's default."""
        if key not in self.DEFAULT_SETTINGS:
            raise ConfigError(f"Unknown setting '{key}'")
        default = self.DEFAULT_SETTINGS[key]
        if isinstance(value, str) and value.lower() in ("none", "null", ""):
            if default is None:
                return None
            raise ConfigError(f"Setting '{key}' cannot be empty")
        try:
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                lowered = str(value).lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                if isinstance(value, str):
                    return [item.strip() for item in value.split(",") if item.strip()]
                return list(value)
            return value
        except (TypeError, ValueError):
            raise ConfigError(
                f"Setting '{key}' expects {type(default).__name__}, got {value!r}"
            )

    def save_settings(self, path: Optional[str] = None):
        """
        Saves the current settings as ``key=value`` lines (or JSON for a .json path).

        Args:
            path: Destination; defaults to the loaded settings file.
        """
        path = path or self.settings_filepath
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            if path.endswith(".json"):
                json.dump(self.settings, f, indent=4, sort_keys=True)
            else:
                for key in sorted(self.settings):
                    value = self.settings[key]
                    if isinstance(value, list):
                        value = ",".join(str(v) for v in value)
                    f.write(f"{key}={value}\n")

    def get_setting(self, key: str) -> Any:
        """
        Retrieves a specific setting.

        Args:
            key: The key of the setting to retrieve.

        Returns:
            The value of the setting, or None if the key doesn't exist.
        """
        return self.settings.get(key)

    def set_setting(self, key: str, value: Any):
        """
        Updates a specific setting in memory, validating it against the schema.

        Args:
            key: The key of the setting to update.
            value: The new value for the setting.
        """
        self.settings[key] = self._coerce(key, value)

    def get_all_settings(self) -> Dict[str, Any]:
        """Returns a copy of all current settings."""
        return self.settings.copy()

    def config_hash(self) -> str:
        """Stable digest of the resolved settings (cache_dir and jobs excluded)."""
        relevant = {
            k: v for k, v in self.settings.items() if k not in ("cache_dir", "jobs")
        }
        payload = json.dumps(relevant, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()
