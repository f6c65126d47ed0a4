"""The default six-appliance synthetic benchmark.

Footprints are consecutive differences, so the ON level itself drops out;
classes are told apart by their ripple (amplitude and period) and by the
decay of the switch-on surge.
"""

from __future__ import annotations

from plugfed.dataset import ApplianceProfile, SynthSpec

P = ApplianceProfile

DEFAULT_PROFILES: tuple[ApplianceProfile, ...] = (
    P("refrigerator", 2, 120, (24, 40), 5, ripple_amp=1.5, ripple_period=10, surge=25, surge_decay=3),
    P("microwave", 3, 1100, (20, 40), 5, ripple_amp=12, ripple_period=4),
    P("television", 1, 90, (20, 40), 5, ripple_amp=0.8, ripple_period=16),
    P("washing_machine", 2, 400, (24, 40), 5, ripple_amp=10, ripple_period=6),
    P("air_conditioner", 5, 1500, (24, 40), 5, surge=150, surge_decay=5),
    P("mixer_grinder", 0, 500, (20, 40), 5, ripple_amp=14, ripple_period=3),
)

DEFAULT_NOISE_SIGMA = 3.0
DEFAULT_DURATION = 400
DEFAULT_SERIES_PER_CLASS = 30
FOOTPRINT_LEN = 32


def profiles_by_name(names: tuple[str, ...] = ()) -> tuple[ApplianceProfile, ...]:
    """Select default profiles by name, keeping the requested order."""
    if not names:
        return DEFAULT_PROFILES
    table = {p.name: p for p in DEFAULT_PROFILES}
    missing = [n for n in names if n not in table]
    if missing:
        raise ValueError(f"unknown appliance profile(s): {', '.join(missing)}")
    return tuple(table[n] for n in names)


def default_synth_spec(
    noise_sigma: float = DEFAULT_NOISE_SIGMA, seed: int = 1, duration: int = DEFAULT_DURATION
) -> SynthSpec:
    return SynthSpec(DEFAULT_PROFILES, noise_sigma=noise_sigma, duration=duration, seed=seed)
