"""Stochastic energy-reduction toolkit.

Thin convenience layer over the compiled extension: trajectory ensembles,
closed-form solutions, and the artifact-writing run pipeline (the same
configuration schema and output layout as the command-line tool).
"""

from __future__ import annotations

import json as _json
from pathlib import Path as _Path

from ._core import (  # noqa: F401
    ConfigError,
    NumericError,
    ValidationError,
    builtin_names,
    eigenvalues,
    ensemble_average,
    fixture_info,
    level_probabilities,
    luders_state,
    moments,
    rho_closed_form,
    rho_integrate,
    run_json,
    simulate,
    state_closed_form,
)

__all__ = [
    "ConfigError",
    "NumericError",
    "ValidationError",
    "builtin_names",
    "eigenvalues",
    "ensemble_average",
    "fixture_info",
    "level_probabilities",
    "luders_state",
    "moments",
    "rho_closed_form",
    "rho_integrate",
    "run",
    "run_json",
    "simulate",
    "state_closed_form",
]


def run(out, **settings):
    """Run one mode end to end, writing artifacts into ``out``.

    Keyword arguments mirror the config-file schema: ``mode``, ``fixture``,
    ``n_trajectories``, ``seed``, ``sigma``, ``dt``, ``horizon_tau``,
    ``collapse_threshold``, ``record_stride``, ``workers``, ``lambdas``,
    ``checks``, ``eval_times_tau``, ``csv_max_traj``.

    Returns a dict with the exit ``code`` (0 ok, 1 a check failed), the
    parsed ``manifest``, and the parsed ``report`` when the mode wrote one.
    """
    out = _Path(out)
    settings["out"] = str(out)
    code = run_json(_json.dumps(settings))
    result = {"code": code, "manifest": None, "report": None}
    manifest = out / "manifest.json"
    report = out / "report.json"
    if manifest.exists():
        result["manifest"] = _json.loads(manifest.read_text())
    if report.exists():
        result["report"] = _json.loads(report.read_text())
    return result
