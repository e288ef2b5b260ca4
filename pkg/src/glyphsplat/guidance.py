"""Guidance providers: where score-distillation gradients come from.

A provider maps a rendered view plus a prompt to a pixel-space gradient.
The returned grad is the full dL/dpixels including any timestep weighting;
callers must not multiply the weight in again (it is reported separately
for logging only).

Two implementations:

  OracleGuidance    closed-form target matching, grad = 2 (image - target).
                    Deterministic, dependency-free; used for tests and any
                    run that needs exact reproducibility.
  ExternalGuidance  newline-delimited JSON over a child process's stdio;
                    images and gradients travel as base64 raw float32.

Any malfunction of the external process surfaces as ProviderFailure; the
optimizer aborts the step with parameters untouched.
"""

from __future__ import annotations

import base64
import json
import logging
import select
import shlex
import subprocess
from dataclasses import dataclass

import numpy as np

from .errors import NoTarget, ProviderFailure, ShapeMismatch
from .rasterizer import RenderedImage

logger = logging.getLogger(__name__)

PROTOCOL_OP = "sds_grad"


@dataclass
class GuidanceRequest:
    image: RenderedImage
    prompt: str
    timestep: int
    seed: int
    component_id: int

    def __post_init__(self):
        if self.timestep < 0:
            raise ValueError("timestep must be nonnegative")


@dataclass
class GuidanceResponse:
    grad: np.ndarray
    weight: float

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.ndim != 3 or self.grad.shape[2] != 3:
            raise ValueError("grad must be (H, W, 3)")
        if not np.all(np.isfinite(self.grad)) or not np.isfinite(self.weight):
            raise ValueError("non-finite guidance response")


class OracleGuidance:
    """Pulls renders toward fixed per-component target images.

    targets maps component_id to a flat RGB color, a full (H, W, 3) image,
    or a callable(request) returning one. Missing component: NoTarget.
    """

    def __init__(self, targets):
        self.targets = dict(targets)

    def target_image(self, request):
        if request.component_id not in self.targets:
            raise NoTarget(f"no target for component {request.component_id}")
        target = self.targets[request.component_id]
        if callable(target):
            target = target(request)
        target = np.asarray(target, dtype=np.float64)
        shape = request.image.pixels.shape
        if target.shape == (3,):
            target = np.broadcast_to(target, shape)
        if target.shape != shape:
            raise ShapeMismatch(f"target shape {target.shape} vs render {shape}")
        return target

    def guide(self, request):
        target = self.target_image(request)
        return GuidanceResponse(grad=2.0 * (request.image.pixels - target), weight=1.0)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def encode_array(arr):
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(payload, shape):
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"payload holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


class ExternalGuidance:
    """JSONL stdio client for an out-of-process guidance model.

    Launches `cmd` once and speaks one JSON object per line:

      -> {"id", "op": "sds_grad", "prompt", "width", "height",
          "timestep", "seed", "component_id", "image_b64"}
      <- {"id", "grad_b64", "weight"}  or  {"id", "error"}

    image_b64/grad_b64 are base64 of raw float32 little-endian H*W*3 data.
    """

    def __init__(self, cmd, timeout=120.0):
        if isinstance(cmd, str):
            cmd = shlex.split(cmd)
        self.timeout = timeout
        self._next_id = 0
        try:
            self.proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProviderFailure(f"could not launch provider: {exc}") from exc

    def _read_line(self):
        stream = self.proc.stdout
        deadline_ok, _, _ = select.select([stream], [], [], self.timeout)
        if not deadline_ok:
            raise ProviderFailure(f"provider timed out after {self.timeout}s")
        line = stream.readline()
        if line == "":
            raise ProviderFailure("provider closed its output stream")
        return line

    def guide(self, request):
        if self.proc.poll() is not None:
            raise ProviderFailure(f"provider exited with code {self.proc.returncode}")
        self._next_id += 1
        h, w, _ = request.image.pixels.shape
        message = {
            "id": self._next_id,
            "op": PROTOCOL_OP,
            "prompt": request.prompt,
            "width": w,
            "height": h,
            "timestep": int(request.timestep),
            "seed": int(request.seed),
            "component_id": int(request.component_id),
            "image_b64": encode_array(request.image.pixels),
        }
        try:
            self.proc.stdin.write(json.dumps(message) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProviderFailure(f"provider pipe broke: {exc}") from exc

        line = self._read_line()
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProviderFailure(f"provider sent invalid JSON: {line!r}") from exc
        if reply.get("id") != self._next_id:
            raise ProviderFailure(f"provider answered id {reply.get('id')}, expected {self._next_id}")
        if "error" in reply:
            raise ProviderFailure(f"provider error: {reply['error']}")
        try:
            grad = decode_array(reply["grad_b64"], (h, w, 3))
            weight = float(reply.get("weight", 1.0))
            return GuidanceResponse(grad=grad, weight=weight)
        except (KeyError, ValueError) as exc:
            raise ProviderFailure(f"malformed provider response: {exc}") from exc

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
