"""
Raster resampling used across the pyramid: exact block means between levels, area-weighted
resampling onto the 256x256 prediction grid, and block-max rendering of binary masks.
"""
import numpy as np


def block_mean(image, factor_h, factor_w=None):
    """
    Downsamples by averaging non-overlapping factor_h x factor_w blocks.
    The image sides must be divisible by the factors, so the global mean is conserved.
    """
    factor_w = factor_h if factor_w is None else factor_w
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % factor_h or w % factor_w:
        raise ValueError(f'{h}x{w} image is not divisible into {factor_h}x{factor_w} blocks')
    blocks = image.reshape((h // factor_h, factor_h, w // factor_w, factor_w) + image.shape[2:])
    return blocks.mean(axis=(1, 3))


def area_weights(n_in, n_out):
    """
    Returns the (n_out, n_in) matrix whose row i holds the fraction of output pixel i covered by each input pixel.
    Intervals are compared on an integer grid (input pixel j spans [j*n_out, (j+1)*n_out)) so weights are exact.
    """
    i = np.arange(n_out)[:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.minimum((j + 1) * n_out, (i + 1) * n_in) - np.maximum(j * n_out, i * n_in)
    return np.clip(overlap, 0, None).astype(np.float64) / n_in


def area_resample(image, out_h, out_w):
    """
    Resamples a (H, W) or (H, W, C) image to (out_h, out_w) by area averaging.
    Integer downsampling factors take the exact block-mean path.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    if h % out_h == 0 and w % out_w == 0:
        return block_mean(image, h // out_h, w // out_w)
    rows = area_weights(h, out_h)
    cols = area_weights(w, out_w)
    resampled = np.tensordot(rows, image, axes=(1, 0))
    resampled = np.tensordot(cols, resampled, axes=(1, 1))
    # tensordot leaves (out_w, out_h, ...)
    return np.swapaxes(resampled, 0, 1)


def _cell_bounds(n_in, n_out):
    starts = (np.arange(n_out) * n_in) // n_out
    ends = -((-(np.arange(n_out) + 1) * n_in) // n_out)
    ends = np.maximum(ends, starts + 1)
    return starts, ends


def block_max(mask, out_h, out_w):
    """
    Renders a binary mask onto an (out_h, out_w) grid: a cell is set if any covered input pixel is set
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % out_h == 0 and w % out_w == 0:
        return mask.reshape(out_h, h // out_h, out_w, w // out_w).max(axis=(1, 3))
    row_starts, row_ends = _cell_bounds(h, out_h)
    col_starts, col_ends = _cell_bounds(w, out_w)
    rows = np.stack([mask[s:e].max(axis=0) for s, e in zip(row_starts, row_ends)])
    return np.stack([rows[:, s:e].max(axis=1) for s, e in zip(col_starts, col_ends)], axis=1)
