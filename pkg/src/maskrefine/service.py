"""Session-oriented HTTP service exposing the refinement loop for
interactive steering.

Each session owns one slice and one trace; requests for a session are
serialized by a per-session lock while model inference is shared
read-only. Noise is keyed by (session seed, iteration index), so
rollback followed by re-stepping with an unchanged threshold replays
bit-identically.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from .calibration import CalibrationResult
from .errors import CheckpointError, ValidationError
from .masking import SpatialMask
from .models import ReconstructionModel, load_checkpoint
from .refinement import (
    IterationState,
    RefinementConfig,
    final_segmentation,
    has_converged,
    next_mask,
    run_iteration_1,
    run_main_iteration,
)

API_VERSION = "1"

STATUS_IDLE = "idle"
STATUS_STEPPING = "stepping"
STATUS_TERMINATED = "terminated"


@dataclass
class ServiceConfig:
    model_dir: str = "models"
    host: str = "127.0.0.1"
    port: int = 8000
    default_percentile: float = 80.0
    export_dir: str | None = None  # default: <model_dir>/../exports

    @classmethod
    def with_env_overrides(cls, **kwargs) -> "ServiceConfig":
        import os

        config = cls(**kwargs)
        if "MASKREFINE_PORT" in os.environ:
            config.port = int(os.environ["MASKREFINE_PORT"])
        if "MASKREFINE_MODEL_DIR" in os.environ:
            config.model_dir = os.environ["MASKREFINE_MODEL_DIR"]
        return config


@dataclass
class Session:
    id: str
    pixels: np.ndarray
    brain_mask: SpatialMask
    model_id: str
    tau: float
    seed: int
    refine: RefinementConfig
    guide: np.ndarray | None = None
    states: list[IterationState] = field(default_factory=list)
    status: str = STATUS_IDLE
    termination_reason: str | None = None
    accepted: dict | None = None
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def touch(self):
        self.updated_at = time.time()


class ServiceError(Exception):
    def __init__(self, status_code: int, category: str, detail: str):
        self.status_code = status_code
        self.category = category
        self.detail = detail
        super().__init__(detail)


class ModelRegistry:
    """Checkpoint pairs (main.pt + init.pt) per subdirectory of model_dir,
    loaded lazily and cached."""

    def __init__(self, model_dir: str | Path):
        self.model_dir = Path(model_dir)
        self._cache: dict[str, tuple[ReconstructionModel, ReconstructionModel]] = {}
        self._lock = threading.Lock()

    def list_ids(self) -> list[str]:
        if not self.model_dir.is_dir():
            return []
        return sorted(
            p.name
            for p in self.model_dir.iterdir()
            if (p / "main.pt").exists() and (p / "init.pt").exists()
        )

    def get(self, model_id: str) -> tuple[ReconstructionModel, ReconstructionModel]:
        with self._lock:
            if model_id not in self._cache:
                root = self.model_dir / model_id
                if not (root / "main.pt").exists() or not (root / "init.pt").exists():
                    raise ServiceError(404, "model", f"unknown model id {model_id!r}")
                try:
                    main_model = load_checkpoint(root / "main.pt")
                    init_model = load_checkpoint(root / "init.pt")
                except CheckpointError as exc:
                    raise ServiceError(500, "model", str(exc)) from exc
                self._cache[model_id] = (main_model, init_model)
            return self._cache[model_id]

    def calibration(self, model_id: str) -> CalibrationResult | None:
        path = self.model_dir / model_id / "calibration.json"
        if not path.exists():
            return None
        return CalibrationResult.from_dict(json.loads(path.read_text()))


class CreateSessionRequest(BaseModel):
    model_id: str
    phantom: dict | None = None
    pixels: list[list[float]] | None = None
    brain_mask: list[list[int]] | None = None
    tau: float | None = None
    percentile: float | None = None
    seed: int = 0
    max_iterations: int = 50


class TauRequest(BaseModel):
    tau: float


class StepRequest(BaseModel):
    n: int = 1


class RollbackRequest(BaseModel):
    iteration: int


class AcceptRequest(BaseModel):
    iteration: int | None = None
    tau: float | None = None


def _png_b64(array: np.ndarray, colormap: str | None = None) -> str:
    """Base64 PNG of a plane; grayscale by normalization, or a fixed
    matplotlib colormap for error maps."""
    from PIL import Image

    a = np.asarray(array, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    norm = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    if colormap:
        from matplotlib import colormaps

        rgba = colormaps[colormap](norm)
        img = Image.fromarray((rgba[..., :3] * 255).astype(np.uint8))
    else:
        img = Image.fromarray((norm * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _overlay_png_b64(pixels: np.ndarray, mask: SpatialMask, segmentation: SpatialMask | None) -> str:
    """Gray base image, mask tinted blue, segmentation tinted red."""
    from PIL import Image

    lo, hi = float(pixels.min()), float(pixels.max())
    gray = (pixels - lo) / (hi - lo) if hi > lo else np.zeros_like(pixels)
    rgb = np.stack([gray, gray, gray], axis=-1)
    m = mask.bool_plane
    rgb[m] = 0.6 * rgb[m] + 0.4 * np.array([0.2, 0.4, 1.0])
    if segmentation is not None:
        s = segmentation.bool_plane
        rgb[s] = 0.4 * rgb[s] + 0.6 * np.array([1.0, 0.15, 0.15])
    img = Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig.with_env_overrides()
    registry = ModelRegistry(config.model_dir)
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    export_root = Path(config.export_dir or (Path(config.model_dir).parent / "exports"))

    app = FastAPI(title="maskrefine session service")

    @app.middleware("http")
    async def version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-API-Version"] = API_VERSION
        return response

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status_code,
            content={"error": exc.category, "detail": exc.detail},
        )

    def get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "session", f"unknown session {session_id!r}")
        return session

    def resolve_slice(body: CreateSessionRequest):
        if body.phantom is not None:
            from .phantom import PhantomSpec, generate_phantom

            try:
                slc, _ = generate_phantom(PhantomSpec(**body.phantom))
            except (TypeError, ValidationError) as exc:
                raise ServiceError(400, "validation", f"bad phantom spec: {exc}") from exc
            return np.asarray(slc.pixels), slc.brain_mask
        if body.pixels is not None:
            try:
                pixels = np.asarray(body.pixels, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ServiceError(400, "validation", f"bad pixel payload: {exc}") from exc
            if pixels.ndim != 2 or not np.all(np.isfinite(pixels)):
                raise ServiceError(400, "validation", "pixels must be a finite 2D array")
            if body.brain_mask is not None:
                try:
                    brain = SpatialMask(np.asarray(body.brain_mask, dtype=np.uint8))
                except (ValidationError, ValueError) as exc:
                    raise ServiceError(400, "validation", f"bad brain mask: {exc}") from exc
                if brain.shape != pixels.shape:
                    raise ServiceError(400, "validation", "brain mask shape mismatch")
            else:
                from .data import derive_brain_mask

                brain = derive_brain_mask(pixels)
            if brain.is_empty:
                raise ServiceError(400, "validation", "empty brain mask")
            return pixels, brain
        raise ServiceError(400, "validation", "provide either a phantom spec or pixels")

    def resolve_tau(body: CreateSessionRequest) -> float:
        if body.tau is not None:
            if body.tau <= 0:
                raise ServiceError(400, "validation", "tau must be > 0")
            return float(body.tau)
        calibration = registry.calibration(body.model_id)
        if calibration is None:
            raise ServiceError(
                400,
                "validation",
                f"model {body.model_id!r} has no calibration.json; pass tau explicitly",
            )
        percentile = (
            body.percentile if body.percentile is not None else config.default_percentile
        )
        try:
            return calibration.tau_for_percentile(percentile)
        except ValidationError as exc:
            raise ServiceError(400, "validation", str(exc)) from exc

    def session_refine_config(session: Session) -> RefinementConfig:
        return RefinementConfig(
            tau=session.tau,
            first_shrink_percentile=session.refine.first_shrink_percentile,
            termination_fraction=session.refine.termination_fraction,
            max_iterations=session.refine.max_iterations,
            radius=session.refine.radius,
        )

    def step_once(session: Session) -> bool:
        """Advance by one iteration; returns False when the session
        terminated instead of stepping."""
        if session.status == STATUS_TERMINATED:
            raise ServiceError(409, "terminal", "session already terminated")
        main_model, init_model = registry.get(session.model_id)
        cfg = session_refine_config(session)
        last = session.states[-1]
        mask = next_mask(last, session.brain_mask, cfg)
        if last.index >= 2 and has_converged(
            last.mask, mask, session.brain_mask.area, cfg.termination_fraction
        ):
            session.status = STATUS_TERMINATED
            session.termination_reason = "converged"
            return False
        if mask.is_empty:
            session.status = STATUS_TERMINATED
            session.termination_reason = "empty_mask"
            return False
        main_count = len(session.states) - 1
        if main_count >= cfg.max_iterations:
            session.status = STATUS_TERMINATED
            session.termination_reason = "max_iterations"
            return False
        guide = session.guide if main_model.kind == "main" else None
        state = run_main_iteration(
            last.index + 1, session.pixels, mask, main_model, guide, session.seed
        )
        session.states.append(state)
        session.touch()
        return True

    def state_payload(session: Session, iteration: int | None) -> dict:
        states = session.states
        if iteration is None:
            state = states[-1]
        else:
            matches = [s for s in states if s.index == iteration]
            if not matches:
                raise ServiceError(
                    400, "range", f"iteration {iteration} not in trace (1..{states[-1].index})"
                )
            state = matches[0]
        segmentation = final_segmentation([state], session.tau)
        return {
            "session_id": session.id,
            "iteration": state.index,
            "iterations": [s.index for s in states],
            "mask_area_history": [s.mask.area for s in states],
            "brain_area": session.brain_mask.area,
            "tau": session.tau,
            "status": session.status,
            "termination_reason": session.termination_reason,
            "mask_png": _png_b64(state.mask.plane.astype(float)),
            "error_png": _png_b64(state.error_map, colormap="magma"),
            "reconstruction_png": _png_b64(state.reconstruction),
            "image_png": _png_b64(session.pixels),
            "overlay_png": _overlay_png_b64(session.pixels, state.mask, segmentation),
            "segmentation_area": segmentation.area,
        }

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "models": registry.list_ids()}

    @app.get("/api/v1/models")
    def list_models():
        return {"models": registry.list_ids()}

    @app.post("/api/v1/sessions")
    def create_session(body: CreateSessionRequest):
        pixels, brain = resolve_slice(body)
        main_model, _ = registry.get(body.model_id)
        tau = resolve_tau(body)
        radius = main_model.radius if main_model.radius is not None else 15.0
        session = Session(
            id=uuid.uuid4().hex[:12],
            pixels=pixels,
            brain_mask=brain,
            model_id=body.model_id,
            tau=tau,
            seed=body.seed,
            refine=RefinementConfig(tau=tau, max_iterations=body.max_iterations, radius=radius),
        )
        with session.lock:
            _, init_model = registry.get(body.model_id)
            from .frequency import structural_guide

            session.guide = structural_guide(pixels, radius)
            session.states.append(run_iteration_1(pixels, brain, init_model, session.guide))
            step_once(session)  # iteration 2: first main-model pass
        with sessions_lock:
            sessions[session.id] = session
        return {"session_id": session.id, "state": state_payload(session, None)}

    @app.get("/api/v1/sessions/{session_id}")
    def session_summary(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return {
                "session_id": session.id,
                "model_id": session.model_id,
                "status": session.status,
                "termination_reason": session.termination_reason,
                "tau": session.tau,
                "iterations": [s.index for s in session.states],
                "mask_area_history": [s.mask.area for s in session.states],
                "created_at": session.created_at,
                "updated_at": session.updated_at,
                "accepted": session.accepted,
            }

    @app.get("/api/v1/sessions/{session_id}/state")
    def session_state(session_id: str, iteration: int | None = None):
        session = get_session(session_id)
        with session.lock:
            return state_payload(session, iteration)

    @app.get("/api/v1/sessions/{session_id}/arrays")
    def session_arrays(session_id: str, iteration: int | None = None, kind: str = "error"):
        session = get_session(session_id)
        with session.lock:
            states = session.states
            state = (
                states[-1]
                if iteration is None
                else next((s for s in states if s.index == iteration), None)
            )
            if state is None:
                raise ServiceError(400, "range", f"iteration {iteration} not in trace")
            planes = {
                "error": state.error_map,
                "mask": state.mask.plane,
                "reconstruction": state.reconstruction,
                "masked_input": state.masked_input,
                "image": session.pixels,
                "segmentation": final_segmentation([state], session.tau).plane,
            }
            if kind not in planes:
                raise ServiceError(400, "validation", f"unknown array kind {kind!r}")
            return {
                "iteration": state.index,
                "kind": kind,
                "values": np.asarray(planes[kind]).tolist(),
            }

    @app.post("/api/v1/sessions/{session_id}/tau")
    def set_tau(session_id: str, body: TauRequest):
        session = get_session(session_id)
        if body.tau <= 0:
            raise ServiceError(400, "validation", "tau must be > 0")
        with session.lock:
            if session.accepted is not None:
                raise ServiceError(409, "terminal", "session is frozen after accept")
            session.tau = float(body.tau)
            # A larger tau can always shrink further: un-terminate.
            if session.status == STATUS_TERMINATED:
                session.status = STATUS_IDLE
                session.termination_reason = None
            session.touch()
            return {"tau": session.tau}

    @app.post("/api/v1/sessions/{session_id}/step")
    def step(session_id: str, body: StepRequest | None = None):
        session = get_session(session_id)
        n = body.n if body else 1
        if n < 1:
            raise ServiceError(400, "validation", "n must be >= 1")
        with session.lock:
            if session.accepted is not None:
                raise ServiceError(409, "terminal", "session is frozen after accept")
            if session.status == STATUS_TERMINATED:
                raise ServiceError(409, "terminal", "session already terminated")
            session.status = STATUS_STEPPING
            try:
                for _ in range(n):
                    if not step_once(session):
                        break
            finally:
                if session.status == STATUS_STEPPING:
                    session.status = STATUS_IDLE
            return state_payload(session, None)

    @app.post("/api/v1/sessions/{session_id}/rollback")
    def rollback(session_id: str, body: RollbackRequest):
        session = get_session(session_id)
        with session.lock:
            if session.accepted is not None:
                raise ServiceError(409, "terminal", "session is frozen after accept")
            last_index = session.states[-1].index
            if body.iteration < 1 or body.iteration > last_index:
                raise ServiceError(
                    400, "range", f"iteration {body.iteration} outside trace (1..{last_index})"
                )
            session.states = [s for s in session.states if s.index <= body.iteration]
            session.status = STATUS_IDLE
            session.termination_reason = None
            if len(session.states) == 1:
                # Keep the eager base: iteration 2 is threshold-independent
                # and replays bit-identically.
                step_once(session)
            session.touch()
            return state_payload(session, None)

    @app.post("/api/v1/sessions/{session_id}/accept")
    def accept(session_id: str, body: AcceptRequest):
        from PIL import Image

        from .nifti import write_volume

        session = get_session(session_id)
        with session.lock:
            if session.accepted is not None:
                raise ServiceError(409, "terminal", "session already accepted")
            states = session.states
            iteration = body.iteration if body.iteration is not None else states[-1].index
            matches = [s for s in states if s.index == iteration]
            if not matches:
                raise ServiceError(400, "range", f"iteration {iteration} not in trace")
            tau = body.tau if body.tau is not None else session.tau
            if tau <= 0:
                raise ServiceError(400, "validation", "tau must be > 0")
            segmentation = final_segmentation([matches[0]], tau)

            export_dir = export_root / session.id
            export_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(segmentation.plane * 255).save(export_dir / "segmentation.png")
            np.save(export_dir / "segmentation.npy", segmentation.plane)
            write_volume(
                export_dir / "segmentation.nii.gz", segmentation.plane[:, :, None].astype(np.uint8)
            )
            files = ["segmentation.png", "segmentation.npy", "segmentation.nii.gz"]
            session.accepted = {
                "iteration": iteration,
                "tau": tau,
                "segmentation_area": segmentation.area,
                "files": files,
            }
            session.status = STATUS_TERMINATED
            session.termination_reason = session.termination_reason or "accepted"
            session.touch()
            return {
                "session_id": session.id,
                "accepted": session.accepted,
                "export": {"files": files},
            }

    @app.get("/api/v1/sessions/{session_id}/export/{filename}")
    def export_file(session_id: str, filename: str):
        session = get_session(session_id)
        if session.accepted is None:
            raise ServiceError(409, "terminal", "accept an iteration before exporting")
        if filename not in session.accepted["files"]:
            raise ServiceError(404, "export", f"no export file {filename!r}")
        return FileResponse(export_root / session.id / filename)

    return app


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
