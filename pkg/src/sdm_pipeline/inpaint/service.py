"""HTTP client for an external control-guided inpainting service.

Wire contract::

    GET  /v1/health  -> 200 when ready
    POST /v1/inpaint {image_png_b64, mask_png_b64, control_png_b64, prompt, seed, steps?}
                     -> {image_png_b64} or {error}
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable

import httpx
import numpy as np
from PIL import Image

from ..errors import BackendError, BackendUnavailable, MismatchedInput, ParseError
from ..imageio import from_png_b64, png_b64

log = logging.getLogger(__name__)


def _resize(img: np.ndarray, size, resample) -> np.ndarray:
    return np.array(Image.fromarray(img).resize(size, resample=resample))


class ServiceClient:
    """Thread-safe client; at most ``max_concurrency`` requests in flight."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5,
                 max_concurrency: int = 4, downscale_factor: int = 4,
                 superres: Callable[[np.ndarray, tuple], np.ndarray] | None = None,
                 transport: httpx.BaseTransport | None = None):
        if retries < 0 or timeout <= 0 or max_concurrency < 1 or downscale_factor < 1:
            raise ValueError("invalid service client settings")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.downscale_factor = int(downscale_factor)
        self.superres = superres
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def health(self) -> bool:
        try:
            r = self._client.get(f"{self.endpoint}/v1/health")
        except httpx.HTTPError:
            return False
        return r.status_code == 200

    def _post(self, body: dict) -> dict:
        url = f"{self.endpoint}/v1/inpaint"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._sem:
                    r = self._client.post(url, json=body)
            except httpx.TimeoutException as exc:
                last = BackendUnavailable(f"request timed out after {self.timeout}s: {exc}")
                log.warning("inpaint attempt %d timed out", attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = BackendUnavailable(f"cannot reach {url}: {exc}")
                log.warning("inpaint attempt %d failed: %s", attempt + 1, exc)
                continue
            if r.status_code >= 500:
                last = BackendError(r.status_code, _error_text(r))
                log.warning("inpaint attempt %d: HTTP %d", attempt + 1, r.status_code)
                continue
            if r.status_code >= 400:
                raise BackendError(r.status_code, _error_text(r))
            try:
                payload = r.json()
            except ValueError as exc:
                raise BackendError(r.status_code, f"response is not JSON: {exc}") from exc
            if "error" in payload:
                raise BackendError(r.status_code, str(payload["error"]))
            if "image_png_b64" not in payload:
                raise BackendError(r.status_code, "response lacks image_png_b64")
            return payload
        assert last is not None
        raise last

    def inpaint(self, image: np.ndarray, mask: np.ndarray, control: np.ndarray, prompt: str = "",
                seed: int = 0, steps: int | None = None, upscale: bool = True) -> np.ndarray:
        """Inpaint at 1/downscale_factor resolution.

        With ``upscale`` the response is brought back to full size by the
        ``superres`` hook (bicubic when none); otherwise it is returned as is.
        """
        H, W = image.shape[:2]
        if np.shape(mask) != (H, W) or np.shape(control) != (H, W):
            raise MismatchedInput(f"image is {W}x{H} but mask is {np.shape(mask)[::-1]} "
                                  f"and control is {np.shape(control)[::-1]}")
        f = self.downscale_factor
        size = (max(1, W // f), max(1, H // f))
        img_s, mask_s, ctrl_s = image, mask.astype(np.uint8) * 255, np.asarray(control, np.uint8)
        if f > 1:
            img_s = _resize(image, size, Image.BOX)
            # any masked / edge pixel in a block keeps the block masked / edged
            mask_s = _resize(mask_s, size, Image.BOX)
            mask_s = np.where(mask_s > 0, 255, 0).astype(np.uint8)
            ctrl_s = np.where(_resize(ctrl_s, size, Image.BOX) > 0, 255, 0).astype(np.uint8)
        body = {"image_png_b64": png_b64(img_s), "mask_png_b64": png_b64(mask_s),
                "control_png_b64": png_b64(ctrl_s), "prompt": prompt, "seed": int(seed)}
        if steps is not None:
            body["steps"] = int(steps)
        payload = self._post(body)
        try:
            out = from_png_b64(payload["image_png_b64"])
        except ParseError as exc:
            raise BackendError(200, str(exc)) from exc
        if out.ndim == 2:
            out = np.repeat(out[..., None], 3, axis=2)
        if out.shape[:2] != (size[1], size[0]):
            raise BackendError(200, f"service returned {out.shape[1]}x{out.shape[0]}, expected {size[0]}x{size[1]}")
        if f > 1 and upscale:
            out = self.superres(out, (H, W)) if self.superres else _resize(out, (W, H), Image.BICUBIC)
            if out.shape[:2] != (H, W):
                raise BackendError(200, "super-resolution hook returned wrong dimensions")
        return out


def _error_text(r: httpx.Response) -> str:
    try:
        return str(r.json().get("error", r.text))
    except ValueError:
        return r.text
