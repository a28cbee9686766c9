"""
Provenance context for experiment runs: scenario_id, method, rotation_deg,
doa_err_az_deg, doa_err_el_deg and seed. Drivers set it once per run and
update the method as they go; report rows are stamped from it.
Uses contextvars so concurrent runs each see their own context.
"""
from contextvars import ContextVar
from typing import Any, Dict, Optional

PROVENANCE_FIELDS = ["scenario_id", "method", "rotation_deg", "doa_err_az_deg", "doa_err_el_deg", "seed"]

_run_context: ContextVar[Optional[Dict[str, Any]]] = ContextVar("run_context", default=None)


def set_run_context(
    scenario_id: str,
    rotation_deg: float,
    doa_err_az_deg: float = 0.0,
    doa_err_el_deg: float = 0.0,
    seed: Optional[int] = None,
    method: Optional[str] = None,
) -> None:
    """Start a new run context, replacing any previous one."""
    _run_context.set({
        "scenario_id": scenario_id,
        "method": method,
        "rotation_deg": rotation_deg,
        "doa_err_az_deg": doa_err_az_deg,
        "doa_err_el_deg": doa_err_el_deg,
        "seed": seed,
    })


def get_run_context() -> Optional[Dict[str, Any]]:
    """Return the current provenance dict or None outside a run."""
    return _run_context.get()


def update_run_context(**fields: Any) -> None:
    ctx = _run_context.get()
    if ctx is None:
        raise RuntimeError("No run context is set; call set_run_context first")
    unknown = set(fields) - set(PROVENANCE_FIELDS)
    if unknown:
        raise ValueError(f"Unknown provenance fields: {sorted(unknown)}")
    _run_context.set({**ctx, **fields})


def clear_run_context() -> Optional[Dict[str, Any]]:
    """Return the current context and clear it."""
    ctx = _run_context.get()
    _run_context.set(None)
    return ctx
