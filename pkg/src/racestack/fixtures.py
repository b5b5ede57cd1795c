"""Synthetic track fixtures: desk-scale stand-ins for the two event ovals.

Both tracks are built from straights and circular arcs with banking ramps at
the turn transitions, sampled at ~2 m and closed exactly by construction.
The 4023 m / 9-deg-turn oval mimics the Indianapolis layout (two long
straights, two short chutes, four quarter turns); the 2410 m / 20-deg-turn
oval is a stadium shape standing in for Las Vegas.
"""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from .track import TrackMap


def _march(pieces, ds: float, width: float, ramp: float = 60.0) -> TrackMap:
    """Integrate a piecewise (length, curvature, banking_deg) description CCW."""
    xs, ys, banks = [], [], []
    x = y = 0.0
    psi = 0.0
    for length, kappa, bank_deg in pieces:
        n = max(2, int(round(length / ds)))
        step = length / n
        for i in range(n):
            pos = i * step
            # Ramp banking in/out near the piece boundaries.
            if bank_deg != 0.0 and ramp > 0.0:
                lead = min(1.0, pos / ramp)
                tail = min(1.0, (length - pos) / ramp)
                b = bank_deg * min(lead, tail, 1.0)
            else:
                b = bank_deg
            xs.append(x)
            ys.append(y)
            banks.append(b)
            if abs(kappa) < 1e-12:
                x += step * math.cos(psi)
                y += step * math.sin(psi)
            else:
                # Exact arc advance keeps the loop closure tight.
                r = 1.0 / kappa
                x += r * (math.sin(psi + kappa * step) - math.sin(psi))
                y -= r * (math.cos(psi + kappa * step) - math.cos(psi))
                psi += kappa * step
    half = width / 2.0
    n_pts = len(xs)
    return TrackMap(np.array(xs), np.array(ys),
                    np.full(n_pts, half), np.full(n_pts, half),
                    np.radians(np.array(banks)))


def build_ims_like(ds: float = 2.0) -> TrackMap:
    """4023 m rectangle-with-rounded-corners oval, 9 deg banking in the turns."""
    radius = 402.0 / (math.pi / 2.0)  # quarter-mile turns
    arc = 402.0
    k = 1.0 / radius
    pieces = [
        (1006.0, 0.0, 0.0), (arc, k, 9.0),
        (201.0, 0.0, 0.0), (arc, k, 9.0),
        (1006.0, 0.0, 0.0), (arc, k, 9.0),
        (201.0, 0.0, 0.0), (arc, k, 9.0),
    ]
    return _march(pieces, ds, width=14.0)


def build_lvms_like(ds: float = 2.0) -> TrackMap:
    """2410 m stadium oval, 20 deg banking in the two 180 deg turns."""
    radius = 220.0
    arc = math.pi * radius
    pieces = [
        (514.3, 0.0, 0.0), (arc, 1.0 / radius, 20.0),
        (514.3, 0.0, 0.0), (arc, 1.0 / radius, 20.0),
    ]
    return _march(pieces, ds, width=13.0)


_BUILDERS = {"ims": build_ims_like, "lvms": build_lvms_like}


def track_fixture_path(name: str):
    """Path of a shipped track CSV (name 'ims' or 'lvms')."""
    return resources.files("racestack.data.tracks") / f"{name}.csv"


def load_fixture(name: str) -> TrackMap:
    if name not in _BUILDERS:
        raise KeyError(f"unknown track fixture {name!r}")
    return _BUILDERS[name]()


def scenario_fixture_path(name: str):
    return resources.files("racestack.data.scenarios") / f"{name}.toml"
