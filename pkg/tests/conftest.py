import numpy as np
import pytest

from bvsbench.config import build_config


@pytest.fixture
def small_bench():
    """32x16 grid, tight DMD, noise-free dual-pathway sensor, ideal EVS."""
    return build_config({
        "grid_width": 32, "grid_height": 16, "seed": 1234,
        "mapping": {"dmd_width": 160, "dmd_height": 96},
        "optics": {"phi_max": 50.0},
        "tianmouc": {"shot_noise": False, "read_noise": 0.0,
                     "adc_bits": 14, "adc_gain": 0.2, "g_td": 0.1, "g_sd": 0.1,
                     "full_well": 1.0e6},
        "evs": {"theta_on": 0.2, "theta_off": 0.2, "tau_ref_ns": 0.0,
                "f_dark": "inf", "f_max": "inf", "k_f": 0.0,
                "log_eps": 1.0e-6, "bus_rate": 1.0e9, "fifo_depth": 100000},
    })


@pytest.fixture
def uniform_frame():
    def make(width, height, level, t0=0, duration=1_321_004):
        from bvsbench.stimulus import TargetFrame

        return TargetFrame(
            width=width, height=height,
            radiance=np.full((height, width), level, dtype=np.float64),
            t_start_ns=t0, duration_ns=duration,
        )

    return make
