import numpy as np
import pytest

from ulfenc.metrics import SSIM_C1, SSIM_C2
from ulfenc.phantom import PhantomConfig, generate_dataset


def naive_ssim3d(x, y, window: int = 11, mask=None) -> float:
    """Reference SSIM: explicit loops over every interior window position.

    Kept deliberately independent of the library implementation (per-window
    numpy statistics instead of box filters).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pad = window // 2
    vals = []
    for i in range(pad, x.shape[0] - pad):
        for j in range(pad, x.shape[1] - pad):
            for k in range(pad, x.shape[2] - pad):
                if mask is not None and not (mask[i, j, k] > 0.5):
                    continue
                sl = (slice(i - pad, i + pad + 1), slice(j - pad, j + pad + 1), slice(k - pad, k + pad + 1))
                wx, wy = x[sl].ravel(), y[sl].ravel()
                mx, my = wx.mean(), wy.mean()
                vx, vy = wx.var(ddof=1), wy.var(ddof=1)
                vxy = ((wx - mx) * (wy - my)).sum() / (wx.size - 1)
                s = ((2 * mx * my + SSIM_C1) * (2 * vxy + SSIM_C2)) / (
                    (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
                )
                vals.append(s)
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four 32^3 phantom subjects (2 train / 2 val) shared across tests."""
    out = tmp_path_factory.mktemp("phantoms")
    cfg = PhantomConfig(seed=7)
    manifest = generate_dataset(cfg, 4, out)
    return manifest
