"""Session-based HTTP API exposing the refinement loop to a human annotator.

The service holds one environment per session: the annotator uploads volumes,
adds object/background clicks, and asks for refinement steps. Steps use the
policy's argmax actions with hint maps built from the accumulated human
clicks; no simulated oracle is involved. Control traffic is JSON; bulk volume
and slice payloads are raw little-endian f32 with explicit dims, so any
client can decode them bit-exactly.

Upload format: the POST /sessions body is a concatenation of volume blocks
(one JSON header line + f32 payload each). An image block is required; prob
and label blocks are optional. Without a prob block the session starts from
the all-background state.
"""
from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .env import ActionSet, apply_actions
from .geodesy import GeodesicConfig, HintMaps, HintSets, build_hint_maps
from .metrics import dice
from .network import ActorCriticNet, load_checkpoint
from .volumes import LabelMask, ProbabilityMap, Volume3D, binarize

AXES = {"x": 0, "y": 1, "z": 2}
LAYERS = ("image", "prob", "hints", "binarized")


class ApiError(Exception):
    """Carried straight into the {code, message} error body."""

    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ClickIn(BaseModel):
    x: int
    y: int
    z: int
    label: str  # object | background


class ClickSummary(BaseModel):
    object: int
    background: int


class SessionCreated(BaseModel):
    id: str
    dims: tuple[int, int, int]
    has_truth: bool


class StepResult(BaseModel):
    step: int
    dims: tuple[int, int, int]
    dice: float | None = None


@dataclass
class Session:
    image: Volume3D
    prob: ProbabilityMap
    truth: LabelMask | None
    hint_sets: HintSets = field(default_factory=HintSets)
    hints: HintMaps | None = None
    hints_dirty: bool = True
    step: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def current_hints(self, geodesy: GeodesicConfig) -> HintMaps:
        if self.hints_dirty or self.hints is None:
            if self.hint_sets.total() == 0:
                self.hints = HintMaps.sentinel(self.image.dims)
            else:
                self.hints = build_hint_maps(self.image, self.hint_sets, geodesy)
            self.hints_dirty = False
        return self.hints


def _parse_upload(body: bytes) -> tuple[Volume3D, ProbabilityMap | None, LabelMask | None]:
    from .datagen import read_volume_stream

    try:
        blocks = read_volume_stream(body)
    except ValueError as exc:
        raise ApiError(400, "BAD_UPLOAD", f"cannot decode volume blocks: {exc}") from None
    image = prob = truth = None
    for vol, kind in blocks:
        if kind == "image" and image is None:
            image = vol
        elif kind == "prob" and prob is None:
            prob = ProbabilityMap(vol.data)
        elif kind == "label" and truth is None:
            truth = LabelMask(vol.data)
        else:
            raise ApiError(400, "BAD_UPLOAD", f"unexpected or duplicate block kind {kind!r}")
    if image is None:
        raise ApiError(400, "BAD_UPLOAD", "an image block is required")
    for other, name in ((prob, "prob"), (truth, "label")):
        if other is not None and other.dims != image.dims:
            raise ApiError(400, "DIMS_MISMATCH",
                           f"{name} dims {other.dims} differ from image dims {image.dims}")
    return image, prob, truth


def create_app(checkpoint_path: str | None = None,
               net: ActorCriticNet | None = None,
               geodesy: GeodesicConfig | None = None,
               actions: ActionSet | None = None) -> FastAPI:
    """Build the service around one policy network.

    Either an already-loaded net or a checkpoint path must be supplied;
    the checkpoint is loaded once and shared by every session.
    """
    if net is None:
        if checkpoint_path is None:
            raise ValueError("create_app needs a checkpoint path or a net")
        net, _meta = load_checkpoint(checkpoint_path)
    geodesy = geodesy or GeodesicConfig(backend="raster", raster_passes=1)
    actions = actions or ActionSet()
    if len(actions) != net.config.n_actions:
        raise ValueError("action set size does not match the network output")

    app = FastAPI(title="voxrefine annotation service")
    # the browser annotator is served from a separate static origin;
    # X-Shape must be exposed or cross-origin pages cannot size slices
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Shape"],
    )
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    app.state.sessions = sessions

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    def get_session(session_id: str) -> Session:
        with registry_lock:
            sess = sessions.get(session_id)
        if sess is None:
            raise ApiError(404, "NO_SESSION", f"unknown session {session_id!r}")
        return sess

    @app.post("/sessions", status_code=201, response_model=SessionCreated)
    async def create_session(request: Request) -> SessionCreated:
        body = await request.body()
        image, prob, truth = _parse_upload(body)
        if prob is None:
            prob = ProbabilityMap(np.zeros(image.dims))
        sess = Session(image=image, prob=prob, truth=truth)
        session_id = uuid.uuid4().hex
        with registry_lock:
            sessions[session_id] = sess
        return SessionCreated(id=session_id, dims=image.dims,
                              has_truth=truth is not None)

    @app.post("/sessions/{session_id}/clicks", response_model=ClickSummary)
    async def add_click(session_id: str, click: ClickIn) -> ClickSummary:
        sess = get_session(session_id)
        if click.label not in ("object", "background"):
            raise ApiError(422, "BAD_LABEL",
                           f"label must be object or background, got {click.label!r}")
        coord = (click.x, click.y, click.z)
        if not all(0 <= c < n for c, n in zip(coord, sess.image.dims)):
            raise ApiError(422, "OUT_OF_BOUNDS",
                           f"voxel {coord} outside dims {sess.image.dims}")
        with sess.lock:
            if sess.hint_sets.add(coord, positive=click.label == "object"):
                sess.hints_dirty = True
            return ClickSummary(object=len(sess.hint_sets.object_hints),
                                background=len(sess.hint_sets.background_hints))

    @app.post("/sessions/{session_id}/step", response_model=StepResult)
    async def refine_step(session_id: str) -> StepResult:
        sess = get_session(session_id)
        if not sess.lock.acquire(blocking=False):
            raise ApiError(409, "STEP_IN_FLIGHT",
                           "another mutation is running on this session")
        try:
            from .env import AgentState

            state = AgentState(image=sess.image, prob=sess.prob,
                               hints=sess.current_hints(geodesy), step=sess.step)
            out = net.forward_state(state)
            idx = out.action_probs.argmax(axis=0)
            sess.prob = apply_actions(sess.prob, idx, actions)
            sess.step += 1
            score = None
            if sess.truth is not None:
                score = dice(binarize(sess.prob), sess.truth)
            return StepResult(step=sess.step, dims=sess.image.dims, dice=score)
        finally:
            sess.lock.release()

    @app.get("/sessions/{session_id}/slices")
    async def get_slice(session_id: str,
                        axis: str = Query(...),
                        index: int = Query(...),
                        layer: str = Query(...)) -> Response:
        sess = get_session(session_id)
        if axis not in AXES:
            raise ApiError(422, "BAD_AXIS", f"axis must be one of {sorted(AXES)}")
        if layer not in LAYERS:
            raise ApiError(422, "BAD_LAYER", f"layer must be one of {LAYERS}")
        ax = AXES[axis]
        if not 0 <= index < sess.image.dims[ax]:
            raise ApiError(422, "BAD_INDEX",
                           f"index {index} outside axis {axis} of dims {sess.image.dims}")
        with sess.lock:
            if layer == "image":
                data = sess.image.data
            elif layer == "prob":
                data = sess.prob.data
            elif layer == "binarized":
                data = binarize(sess.prob).data
            else:
                # single signed field: object proximity minus background proximity
                hints = sess.current_hints(geodesy)
                data = hints.background_map.data - hints.object_map.data
            plane = np.take(data, index, axis=ax)
        rows, cols = plane.shape
        payload = plane.astype("<f4").tobytes(order="C")
        return Response(content=payload, media_type="application/octet-stream",
                        headers={"X-Shape": f"{rows},{cols}"})

    @app.delete("/sessions/{session_id}", status_code=204)
    async def delete_session(session_id: str) -> Response:
        with registry_lock:
            if sessions.pop(session_id, None) is None:
                raise ApiError(404, "NO_SESSION", f"unknown session {session_id!r}")
        return Response(status_code=204)

    return app
