"""PNG export, uint8 conversion, and grid layout."""

import numpy as np
import pytest
import torch

from semadv.imaging import (
    from_uint8,
    image_grid,
    load_png,
    pair_grid,
    save_image_grid,
    save_png,
    to_uint8,
    trajectory_strip,
)


def test_to_uint8_endpoints_and_shape():
    img = torch.tensor([[[-1.0, 0.0], [1.0, 0.5]]])  # (1, 2, 2)
    arr = to_uint8(img)
    assert arr.dtype == np.uint8
    assert arr.shape == (2, 2)  # single channel squeezed
    assert arr[0, 0] == 0 and arr[1, 0] == 255
    assert arr[0, 1] == 128  # round(127.5)


def test_to_uint8_clamps_out_of_range():
    img = torch.tensor([[[-3.0, 3.0]]])
    arr = to_uint8(img)
    assert arr[0, 0] == 0 and arr[0, 1] == 255


def test_to_uint8_batch_and_rgb_layout():
    batch = torch.zeros((5, 3, 4, 6))
    assert to_uint8(batch).shape == (5, 4, 6, 3)


def test_uint8_roundtrip_error_within_quantization():
    rng = torch.Generator().manual_seed(0)
    img = torch.rand((1, 16, 16), generator=rng) * 2 - 1
    back = from_uint8(to_uint8(img))
    assert back.shape == img.shape
    assert (back - img).abs().max() <= (1.0 / 127.5)


def test_png_roundtrip_is_exact_on_uint8_grid(tmp_path):
    rng = torch.Generator().manual_seed(1)
    img = torch.rand((1, 8, 8), generator=rng) * 2 - 1
    path = save_png(img, tmp_path / "img.png")
    loaded = load_png(path)
    assert np.array_equal(to_uint8(loaded), to_uint8(img))


def test_image_grid_dimensions_and_cell_content():
    imgs = torch.arange(6, dtype=torch.float32).view(6, 1, 1, 1).expand(6, 1, 4, 4) / 10
    grid = image_grid(imgs, ncols=3, padding=2)
    assert grid.shape == (1, 2 * (4 + 2) + 2, 3 * (4 + 2) + 2)
    # cell (row 1, col 2) holds image index 5
    assert torch.allclose(grid[:, 8:12, 14:18], imgs[5])


def test_image_grid_rejects_empty_batch():
    with pytest.raises(ValueError):
        image_grid(torch.zeros((0, 1, 4, 4)))


def test_save_image_grid_writes_file(tmp_path):
    imgs = torch.zeros((4, 1, 8, 8))
    path = save_image_grid(imgs, tmp_path / "grid.png", ncols=2)
    assert path.exists() and path.stat().st_size > 0


def test_pair_grid_stacks_originals_over_edits():
    a = torch.zeros((3, 1, 4, 4))
    b = torch.ones((3, 1, 4, 4))
    grid = pair_grid(a, b)
    h = grid.shape[1]
    top, bottom = grid[:, : h // 2], grid[:, h // 2 :]
    assert top.min() < bottom.min()  # zeros above, ones below


def test_pair_grid_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        pair_grid(torch.zeros((2, 1, 4, 4)), torch.zeros((3, 1, 4, 4)))


class _FakeTrajectory:
    def __init__(self):
        self.timesteps = [30, 20, 10, 0]
        self.xs = [torch.full((1, 1, 4, 4), 0.1 * i) for i in range(4)]
        self.pred_x0 = {30: torch.zeros((1, 1, 4, 4)), 10: torch.ones((1, 1, 4, 4))}


def test_trajectory_strip_subsamples_and_keeps_last(tmp_path):
    strip = trajectory_strip(_FakeTrajectory(), every=3, path=tmp_path / "strip.png")
    # picks indices 0, 3 -> two frames wide
    assert strip.shape[2] == 2 * (4 + 2) + 2
    assert (tmp_path / "strip.png").exists()
