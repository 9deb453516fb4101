"""Shared appearance field: per-Gaussian RGB from position, view direction,
time, and an instance embedding.

The field concatenates three encodings plus the embedding and decodes
through a small fully connected network:

    rgb = sigmoid(MLP([hash(position) | sh(direction) | sincos(time) | e]))

Positions are normalized into the scene bounds and looked up in a
multiresolution grid (dense where a level's full grid fits in the table,
spatial-hashed above that).  Directions use a real spherical-harmonic
basis, time a geometric ladder of sinusoids.  Everything is float64 and
the backward pass is hand-derived; gradient accumulation into the tables
is a single deterministic scatter-add per level.
"""

import numpy as np

from .scene import EMBED_DIM, sigmoid

HASH_PRIMES = (1, 2654435761, 805459861)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)


class HashGridEncoding:
    """Multiresolution feature grid with trilinear interpolation.

    Levels grow geometrically from base_resolution; a level stores a
    dense (n+1)^3 table when that fits within table_size, otherwise
    table_size entries addressed by the XOR-of-primes spatial hash.
    """

    def __init__(self, n_levels=8, base_resolution=16, growth=1.5,
                 log2_table_size=15, n_features=2, rng=None):
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 1 << log2_table_size
        self.resolutions = [int(np.floor(base_resolution * growth ** l))
                            for l in range(n_levels)]
        if rng is None:
            rng = np.random.default_rng(0)
        self.tables = []
        self.dense = []
        for res in self.resolutions:
            full = (res + 1) ** 3
            dense = full <= self.table_size
            n_entries = full if dense else self.table_size
            self.dense.append(dense)
            self.tables.append(rng.uniform(-1e-4, 1e-4, size=(n_entries, n_features)))

    @property
    def out_dim(self):
        return self.n_levels * self.n_features

    def _corner_indices(self, cells, res, dense):
        """Table rows for the 8 cell corners; cells is (n, 3) int."""
        offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        corners = cells[:, None, :] + offs[None, :, :]  # (n, 8, 3)
        if dense:
            n1 = res + 1
            return (corners[..., 0] * n1 + corners[..., 1]) * n1 + corners[..., 2]
        h = (corners[..., 0] * HASH_PRIMES[0]
             ^ corners[..., 1] * HASH_PRIMES[1]
             ^ corners[..., 2] * HASH_PRIMES[2])
        return h % self.table_size

    def encode(self, positions, bounds):
        """Concatenated per-level features (n, L*F) plus a backward cache."""
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        lo, hi = bounds[0], bounds[1]
        span = np.maximum(hi - lo, 1e-12)
        clamped = np.clip(positions, lo, hi)
        inside = ((positions >= lo) & (positions <= hi)).astype(float)
        x01 = (clamped - lo) / span
        feats = []
        cache = {"span": span, "inside": inside, "levels": []}
        for l, res in enumerate(self.resolutions):
            x = x01 * res
            cells = np.minimum(x.astype(int), res - 1)
            u = x - cells  # in [0, 1]
            idx = self._corner_indices(cells, res, self.dense[l])
            w = self._trilinear_weights(u)  # (n, 8)
            f = np.einsum("nc,ncf->nf", w, self.tables[l][idx])
            feats.append(f)
            cache["levels"].append((idx, w, u, res))
        cache["n"] = len(positions)
        return np.concatenate(feats, axis=1), cache

    @staticmethod
    def _trilinear_weights(u):
        wx = np.stack([1.0 - u[:, 0], u[:, 0]], axis=1)
        wy = np.stack([1.0 - u[:, 1], u[:, 1]], axis=1)
        wz = np.stack([1.0 - u[:, 2], u[:, 2]], axis=1)
        return (wx[:, :, None, None] * wy[:, None, :, None]
                * wz[:, None, None, :]).reshape(len(u), 8)

    @staticmethod
    def _trilinear_weight_grads(u):
        """dw/du (n, 8, 3) for the corner order used by _corner_indices."""
        n = len(u)
        ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
        wx = np.stack([1.0 - ux, ux], axis=1)
        wy = np.stack([1.0 - uy, uy], axis=1)
        wz = np.stack([1.0 - uz, uz], axis=1)
        sx = np.array([-1.0, 1.0])
        g = np.zeros((n, 2, 2, 2, 3))
        g[..., 0] = sx[None, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        g[..., 1] = wx[:, :, None, None] * sx[None, None, :, None] * wz[:, None, None, :]
        g[..., 2] = wx[:, :, None, None] * wy[:, None, :, None] * sx[None, None, None, :]
        return g.reshape(n, 8, 3)

    def backward(self, cache, g_feats, table_grads=None):
        """Gradients w.r.t. positions; optionally scatter table gradients.

        table_grads, when given, is a list of arrays matching self.tables.
        Returns g_positions (n, 3).
        """
        n = cache["n"]
        g_pos = np.zeros((n, 3))
        f = self.n_features
        for l, (idx, w, u, res) in enumerate(cache["levels"]):
            g_f = g_feats[:, l * f:(l + 1) * f]  # (n, F)
            corner_feats = self.tables[l][idx]  # (n, 8, F)
            g_w = np.einsum("ncf,nf->nc", corner_feats, g_f)
            dw = self._trilinear_weight_grads(u)
            g_pos += np.einsum("nc,ncd->nd", g_w, dw) * (res / cache["span"])
            if table_grads is not None:
                contrib = w[:, :, None] * g_f[:, None, :]  # (n, 8, F)
                flat_idx = idx.reshape(-1)
                rows = len(table_grads[l])
                for c in range(f):
                    table_grads[l][:, c] += np.bincount(
                        flat_idx, weights=contrib[:, :, c].reshape(-1),
                        minlength=rows)
        return g_pos * cache["inside"]


def encode_position(positions, grid, bounds):
    """Hash-grid features for world positions clamped into the scene bounds."""
    feats, _ = grid.encode(positions, bounds)
    return feats


def sh_basis(d, lmax=2):
    """Real spherical harmonics up to degree lmax, (n, (lmax+1)^2).

    Non-unit directions are normalized internally.
    """
    vals, _ = _sh_basis_cache(np.atleast_2d(np.asarray(d, dtype=float)), lmax)
    return vals


def _sh_basis_cache(d, lmax):
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-12)
    u = d / norm
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    n = len(d)
    b = (lmax + 1) ** 2
    vals = np.zeros((n, b))
    g = np.zeros((n, b, 3))  # d(vals)/d(unit direction)
    vals[:, 0] = SH_C0
    if lmax >= 1:
        vals[:, 1] = SH_C1 * y
        vals[:, 2] = SH_C1 * z
        vals[:, 3] = SH_C1 * x
        g[:, 1, 1] = SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = SH_C1
    if lmax >= 2:
        vals[:, 4] = SH_C2[0] * x * y
        vals[:, 5] = SH_C2[1] * y * z
        vals[:, 6] = SH_C2[2] * (3.0 * z * z - 1.0)
        vals[:, 7] = SH_C2[3] * x * z
        vals[:, 8] = SH_C2[4] * (x * x - y * y)
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 2] = SH_C2[2] * 6.0 * z
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * 2.0 * x
        g[:, 8, 1] = -SH_C2[4] * 2.0 * y
    return vals, (u, norm, g)


def _sh_backward(cache, g_vals):
    """Chain SH gradients back to the raw (possibly non-unit) direction."""
    u, norm, g = cache
    g_u = np.einsum("nbd,nb->nd", g, g_vals)
    # u = d / |d|  =>  du/dd = (I - u u^T)/|d|
    return (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / norm


def temporal_embed(t, n_frequencies=4):
    """(sin(2pi 2^k t), cos(2pi 2^k t)) for k = 0..n_frequencies-1."""
    freqs = 2.0 ** np.arange(n_frequencies)
    phase = 2.0 * np.pi * freqs * t
    return np.concatenate([np.sin(phase), np.cos(phase)])


class AppearanceField:
    """Hash grid + SH + temporal codes decoded by a 2-hidden-layer MLP.

    The output layer starts at zero, so a fresh field renders mid-gray
    everywhere (sigmoid(0) = 0.5).  Static Gaussians share one embedding;
    dynamic objects bring their own.
    """

    def __init__(self, lmax=2, n_frequencies=4, hidden=64, embed_dim=EMBED_DIM,
                 grid=None, seed=0):
        rng = np.random.default_rng(seed)
        self.grid = grid if grid is not None else HashGridEncoding(rng=rng)
        self.lmax = lmax
        self.n_frequencies = n_frequencies
        self.embed_dim = embed_dim
        d_in = self.grid.out_dim + (lmax + 1) ** 2 + 2 * n_frequencies + embed_dim
        self.d_in = d_in
        self.w0 = rng.normal(size=(d_in, hidden)) * np.sqrt(2.0 / d_in)
        self.b0 = np.zeros(hidden)
        self.w1 = rng.normal(size=(hidden, hidden)) * np.sqrt(2.0 / hidden)
        self.b1 = np.zeros(hidden)
        self.w2 = np.zeros((hidden, 3))
        self.b2 = np.zeros(3)
        self.static_embedding = np.zeros(embed_dim)

    def param_items(self):
        """(name, array) pairs for every learnable array in the field."""
        items = [(f"appearance.grid.{l}", tbl) for l, tbl in enumerate(self.grid.tables)]
        items += [("appearance.w0", self.w0), ("appearance.b0", self.b0),
                  ("appearance.w1", self.w1), ("appearance.b1", self.b1),
                  ("appearance.w2", self.w2), ("appearance.b2", self.b2),
                  ("appearance.static_embedding", self.static_embedding)]
        return items

    def eval(self, positions, dirs, t_norm, embeds, bounds):
        """RGB in (0,1)^3 per input row, plus the backward cache."""
        positions = np.atleast_2d(positions)
        feats, grid_cache = self.grid.encode(positions, bounds)
        sh, sh_cache = _sh_basis_cache(np.atleast_2d(dirs), self.lmax)
        temp = temporal_embed(t_norm, self.n_frequencies)
        temp = np.broadcast_to(temp, (len(positions), temp.size))
        x = np.concatenate([feats, sh, temp, np.atleast_2d(embeds)], axis=1)
        h0 = np.tanh(x @ self.w0 + self.b0)
        h1 = np.tanh(h0 @ self.w1 + self.b1)
        rgb = sigmoid(h1 @ self.w2 + self.b2)
        cache = {"x": x, "h0": h0, "h1": h1, "rgb": rgb,
                 "grid": grid_cache, "sh": sh_cache}
        return rgb, cache

    def backward(self, cache, g_rgb, grads=None):
        """Backward through the decoder and encodings.

        Returns (g_positions, g_dirs, g_embeds); decoder/table/embedding
        gradients are accumulated into grads when provided (keys as in
        param_items, embeddings handled by the caller via g_embeds).
        """
        x, h0, h1, rgb = cache["x"], cache["h0"], cache["h1"], cache["rgb"]
        g_z2 = g_rgb * rgb * (1.0 - rgb)
        g_h1 = g_z2 @ self.w2.T
        g_z1 = g_h1 * (1.0 - h1 * h1)
        g_h0 = g_z1 @ self.w1.T
        g_z0 = g_h0 * (1.0 - h0 * h0)
        g_x = g_z0 @ self.w0.T
        if grads is not None:
            grads["appearance.w2"] += h1.T @ g_z2
            grads["appearance.b2"] += g_z2.sum(axis=0)
            grads["appearance.w1"] += h0.T @ g_z1
            grads["appearance.b1"] += g_z1.sum(axis=0)
            grads["appearance.w0"] += x.T @ g_z0
            grads["appearance.b0"] += g_z0.sum(axis=0)
        f = self.grid.out_dim
        b = (self.lmax + 1) ** 2
        tm = 2 * self.n_frequencies
        table_grads = None
        if grads is not None:
            table_grads = [grads[f"appearance.grid.{l}"] for l in range(self.grid.n_levels)]
        g_pos = self.grid.backward(cache["grid"], g_x[:, :f], table_grads)
        g_dirs = _sh_backward(cache["sh"], g_x[:, f:f + b])
        g_embeds = g_x[:, f + b + tm:]
        return g_pos, g_dirs, g_embeds


def eval_appearance(mu, d, t, e, field, bounds):
    """RGB for one or more Gaussians (Eq. A = f(position, dir, time, embed))."""
    rgb, _ = field.eval(mu, d, t, e, bounds)
    return rgb
