"""Li-ion polymer cell models, their identification and closed-loop SOC estimation."""

from .core import CellParams, Soc, Trace, peukert_current, soc_step, soc_trajectory
from .estimate import SocEkfConfig, soc_ekf_run
from .ident import (EkfConfig, RbfEkfConfig, ekf_identify, ekf_identify_rbf, fit_combined,
                    fit_scheduled, initial_filter_template, relative_p0)
from .models import (CombinedParams, FilterStateParams, RbfParams, ScheduledParams,
                     load_params, save_params, simulate)
from .plant import (PlantConfig, ProfileSpec, SensorConfig, apply_sensor, default_truth_params,
                    gen_profile, plant_simulate)

__all__ = [
    "CellParams", "Soc", "Trace", "peukert_current", "soc_step", "soc_trajectory",
    "SocEkfConfig", "soc_ekf_run",
    "EkfConfig", "RbfEkfConfig", "ekf_identify", "ekf_identify_rbf", "fit_combined",
    "fit_scheduled", "initial_filter_template", "relative_p0",
    "CombinedParams", "FilterStateParams", "RbfParams", "ScheduledParams", "load_params",
    "save_params", "simulate",
    "PlantConfig", "ProfileSpec", "SensorConfig", "apply_sensor", "default_truth_params",
    "gen_profile", "plant_simulate",
]
