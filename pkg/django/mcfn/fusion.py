"""
Forward computation of the fusion network.

    tokens --MAB--> magnification-aware tokens --CMB (with post-MAB neighbours)--> fused tokens --decoder--> heatmap

MAB adds gamma * Attn(t^m, X^m, X^m), a single D-vector, to every token of level m.
CMB resamples each adjacent level to the current grid, attends to it with that neighbour's
magnification token inside aligned windows (or globally), and adds the result weighted by u (lower)
or w (upper).
"""
import logging
import math

import torch
import torch.nn.functional as F

from encoder.encoders import encode_pyramid

from .exceptions import DimensionError, McfnConfigurationError, NumericInputError, ResampleError
from .network import Heatmap

logger = logging.getLogger(__name__)


def _check_finite(*tensors):
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise NumericInputError('Non-finite values in fusion network input')


def attn(q, K, V, proj):
    """
    Scaled dot-product attention of one query over N keys: W_o . softmax((W_q q)(W_k K)^T / sqrt(d)) (W_v V).
    K and V may carry leading batch dimensions (..., N, D); the result is (..., D).
    """
    _check_finite(q, K, V)
    dim = q.shape[-1]
    if K.shape[-1] != dim or V.shape != K.shape:
        raise DimensionError(f'Query dim {dim} does not match keys {tuple(K.shape)} / values {tuple(V.shape)}')
    heads = proj.heads
    head_dim = dim // heads
    batch = K.shape[:-1]

    query = proj.q(q).reshape(heads, head_dim)
    keys = proj.k(K).reshape(*batch, heads, head_dim)
    values = proj.v(V).reshape(*batch, heads, head_dim)
    logits = torch.einsum('hd,...nhd->...hn', query, keys) / math.sqrt(head_dim)
    weights = torch.softmax(logits, dim=-1)
    mixed = torch.einsum('...hn,...nhd->...hd', weights, values)
    return proj.o(mixed.reshape(*batch[:-1], dim))


def _magnification_token(params, m):
    if not 0 <= m < params.level_count:
        raise McfnConfigurationError(f'No magnification token for level {m} ({params.level_count} configured)')
    return params.magnification_tokens[m]


def mab_forward(X, m, params):
    token = _magnification_token(params, m)
    flat = X.flat()
    update = attn(token, flat, flat, params.mab)
    return X.with_tokens(X.tokens + params.gamma * update)


def resample_grid(X, target):
    """
    Brings a token grid to target (G_h, G_w): block mean along axes that shrink (integer factors only),
    bilinear interpolation along axes that grow
    """
    source = X.grid_shape
    target = tuple(target)
    if source == target:
        return X

    kernel = []
    for src, tgt in zip(source, target):
        if tgt < src:
            if src % tgt:
                raise ResampleError(f'Cannot block-average a {source} grid down to {target}')
            kernel.append(src // tgt)
        else:
            kernel.append(1)

    tokens = X.tokens.permute(2, 0, 1).unsqueeze(0)
    if kernel != [1, 1]:
        tokens = F.avg_pool2d(tokens, kernel_size=tuple(kernel))
    if tuple(tokens.shape[-2:]) != target:
        tokens = F.interpolate(tokens, size=target, mode='bilinear', align_corners=False)
    cell_size = tuple(c * s / t for c, s, t in zip(X.cell_size, source, target))
    resampled = tokens[0].permute(1, 2, 0)
    return type(X)(tokens=resampled, level_index=X.level_index, cell_size=cell_size)


def _neighbour_context(query, tokens, proj, window, global_attention):
    grid_h, grid_w, dim = tokens.shape
    if global_attention:
        flat = tokens.reshape(-1, dim)
        return attn(query, flat, flat, proj).expand(grid_h, grid_w, dim)
    if grid_h % window or grid_w % window:
        raise McfnConfigurationError(f'Window {window} does not tile a {grid_h}x{grid_w} grid')
    windows = (tokens.reshape(grid_h // window, window, grid_w // window, window, dim)
               .permute(0, 2, 1, 3, 4)
               .reshape(grid_h // window, grid_w // window, window * window, dim))
    context = attn(query, windows, windows, proj)
    return context.repeat_interleave(window, dim=0).repeat_interleave(window, dim=1)


def cmb_forward(X, m, params, lower=None, upper=None):
    """
    Fuses post-MAB neighbours into level m; an absent neighbour contributes nothing
    """
    tokens = X.tokens
    config = params.config
    for neighbour, weight, index in ((lower, params.u, m - 1), (upper, params.w, m + 1)):
        if neighbour is None:
            continue
        if neighbour.dim != X.dim:
            raise DimensionError(f'Level {index} tokens have dim {neighbour.dim}, level {m} has {X.dim}')
        aligned = resample_grid(neighbour, X.grid_shape)
        context = _neighbour_context(_magnification_token(params, index), aligned.tokens, params.cmb,
                                     config.window, config.cmb_global)
        tokens = tokens + weight * context
    return X.with_tokens(tokens)


def decode(X, params):
    _check_finite(X.tokens)
    return Heatmap(values=params.decoder(X.tokens), level_index=X.level_index)


def _check_levels(token_grids, params):
    if len(token_grids) != params.level_count:
        raise McfnConfigurationError(
            f'The network has {params.level_count} magnification tokens but the slide has {len(token_grids)} levels'
        )


def _mab_or_identity(token_grids, m, params):
    if not params.config.use_mab:
        return token_grids[m]
    return mab_forward(token_grids[m], m, params)


def predict_level(token_grids, m, params, magnification_aware=None):
    """
    Heatmap for level m from the encoder tokens of every level.
    magnification_aware may hold already computed post-MAB grids keyed by level.
    """
    _check_levels(token_grids, params)
    if magnification_aware is None:
        magnification_aware = {}
    config = params.config
    needed = [i for i in (m - 1, m, m + 1) if 0 <= i < len(token_grids)]
    for i in needed:
        if i not in magnification_aware:
            magnification_aware[i] = _mab_or_identity(token_grids, i, params)

    lower = magnification_aware.get(m - 1) if config.use_cmb_low else None
    upper = magnification_aware.get(m + 1) if config.use_cmb_high else None
    fused = cmb_forward(magnification_aware[m], m, params, lower=lower, upper=upper)
    return decode(fused, params)


def predict_all(token_grids, params):
    _check_levels(token_grids, params)
    magnification_aware = {}
    return [predict_level(token_grids, m, params, magnification_aware) for m in range(len(token_grids))]


def mcfn_forward(pyramid, m, params, spec, encoder=None, token_grids=None):
    """
    P^m = F_mcfn(I^m): render, encode, MAB over the levels needed, CMB, decode
    """
    pyramid.level(m)
    if token_grids is None:
        token_grids = encode_pyramid(pyramid, spec, encoder=encoder)
    return predict_level(token_grids, m, params)
