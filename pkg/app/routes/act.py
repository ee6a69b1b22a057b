# app/routes/act.py
from typing import List, Optional

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..composite import combined_act
from ..errors import ConfigurationError
from ..registry import get_bundle
from ..sessions import ensure_session, get_mode, reset_session, set_mode

router = APIRouter()


class ActRequest(BaseModel):
    session_id: Optional[str] = None
    observation: List[float]


class ActResponse(BaseModel):
    session_id: str
    action: List[float]
    mode: str
    psi: float


class ResetRequest(BaseModel):
    session_id: str


@router.post("/act", response_model=ActResponse)
def act(req: ActRequest):
    try:
        bundle = get_bundle()
    except ConfigurationError as e:
        raise HTTPException(status_code=503, detail=str(e))
    obs = np.asarray(req.observation, dtype=float)
    if obs.shape != (bundle.observation_dim,):
        raise HTTPException(
            status_code=422,
            detail=f"observation must have {bundle.observation_dim} entries, got {obs.size}",
        )
    if not np.all(np.isfinite(obs)):
        raise HTTPException(status_code=422, detail="observation must be finite")

    sid = ensure_session(req.session_id)
    psi = bundle.osse(obs)
    action, mode = combined_act(
        obs, get_mode(sid), bundle.thresholds, psi,
        bundle.pi_task.mean_action, bundle.pi_protect.mean_action,
    )
    set_mode(sid, mode)
    return ActResponse(
        session_id=sid,
        action=[float(a) for a in np.clip(action, -1.0, 1.0)],
        mode=mode.value,
        psi=psi,
    )


@router.post("/reset")
def reset(req: ResetRequest):
    reset_session(req.session_id)
    return {"session_id": req.session_id, "mode": get_mode(req.session_id).value}
