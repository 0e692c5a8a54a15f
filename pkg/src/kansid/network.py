"""Spline-edge networks.

Every edge carries its own learnable univariate function

    phi(x) = w_base * silu(x) + w_spline * sum_i coeffs[i] * B_i(x)

on a per-edge B-spline grid; a node simply sums its incoming edge outputs.
An edge may instead be frozen to a symbolic form ``c * f(a*x + b) + d``, in
which case its parameters leave the trainable set.

The backward pass returns exact gradients for the packed parameter vector
(per trainable edge: coefficients in basis order, then ``w_base``, then
``w_spline``; edges ordered by layer, then output node, then input node).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelFormatError, NotSymbolicError
from .splines import (SplineGrid, basis_derivative_matrix, basis_matrix,
                      make_uniform_grid)
from .symbolic import (DEFAULT_LIBRARY, PRIMITIVES, SymbolicEquation,
                       SymbolicFit, SymbolicOverride, fold_affine_layers,
                       suggest_primitives, fit_primitive)
from .util import atomic_write_text


@dataclass
class SplineEdge:
    grid: SplineGrid
    coeffs: np.ndarray
    w_base: float
    w_spline: float
    symbolic: SymbolicOverride | None = None

    @property
    def trainable(self) -> bool:
        return self.symbolic is None

    @property
    def num_params(self) -> int:
        return self.grid.num_basis + 2 if self.trainable else 0


@dataclass
class KanLayer:
    in_dim: int
    out_dim: int
    edges: list[list[SplineEdge]]  # indexed [out][in]


@dataclass
class KanNetwork:
    shape: list[int]
    layers: list[KanLayer]
    input_labels: list[str]
    seed: int
    ts_seconds: float | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def new_network(shape, input_labels, grids=None, seed: int = 0,
                ts_seconds: float | None = None,
                default_range=(-1.0, 1.0), num_intervals: int = 5,
                order: int = 3) -> KanNetwork:
    """Freshly initialized network.

    ``grids`` optionally supplies one grid per input column for the first
    layer; deeper layers (and omitted inputs) get a uniform grid over
    ``default_range``. Coefficients draw from N(0, 0.1), ``w_spline``
    starts at 1 and ``w_base`` from U(+/- 1/sqrt(in_dim)).
    """
    shape = [int(s) for s in shape]
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise ValueError(f"bad network shape {shape}")
    if len(input_labels) != shape[0]:
        raise ValueError(
            f"{len(input_labels)} input labels for {shape[0]} inputs")
    if grids is not None and len(grids) != shape[0]:
        raise ValueError(f"{len(grids)} grids for {shape[0]} inputs")
    rng = np.random.default_rng(seed)
    fallback = make_uniform_grid(default_range[0], default_range[1],
                                 num_intervals, order)
    layers = []
    for l in range(len(shape) - 1):
        in_dim, out_dim = shape[l], shape[l + 1]
        rows = []
        for _ in range(out_dim):
            row = []
            for i in range(in_dim):
                grid = grids[i] if (l == 0 and grids is not None) else fallback
                coeffs = rng.normal(0.0, 0.1, grid.num_basis)
                w_base = rng.uniform(-1.0, 1.0) / np.sqrt(in_dim)
                row.append(SplineEdge(grid=grid, coeffs=coeffs,
                                      w_base=float(w_base), w_spline=1.0))
            rows.append(row)
        layers.append(KanLayer(in_dim=in_dim, out_dim=out_dim, edges=rows))
    return KanNetwork(shape=shape, layers=layers,
                      input_labels=list(input_labels), seed=int(seed),
                      ts_seconds=ts_seconds)


@dataclass
class _LayerCache:
    x: np.ndarray                 # (N, in_dim)
    sig: np.ndarray               # sigmoid(x), reused for silu and its slope
    acts: np.ndarray              # (N, out_dim, in_dim)
    basis: list                   # [out][in] -> (N, num_basis) or None
    spline_vals: list             # [out][in] -> (N,) or None


@dataclass
class ForwardCache:
    layers: list[_LayerCache]
    outputs: np.ndarray           # (N, shape[-1])


def forward(net: KanNetwork, inputs, with_cache: bool = False):
    """Evaluate the network; 1-D input yields a 1-D output vector."""
    arr = np.asarray(inputs, dtype=float)
    single = arr.ndim == 1
    x = np.atleast_2d(arr)
    if x.shape[1] != net.shape[0]:
        raise ValueError(
            f"expected {net.shape[0]} input columns, got {x.shape[1]}")
    n = x.shape[0]
    caches = []
    for layer in net.layers:
        sig = _sigmoid(x)
        silu = x * sig
        acts = np.empty((n, layer.out_dim, layer.in_dim))
        basis = [[None] * layer.in_dim for _ in range(layer.out_dim)]
        spline_vals = [[None] * layer.in_dim for _ in range(layer.out_dim)]
        for j, row in enumerate(layer.edges):
            for i, edge in enumerate(row):
                xi = x[:, i]
                if edge.symbolic is not None:
                    acts[:, j, i] = edge.symbolic.eval(xi)
                    continue
                bmat = basis_matrix(edge.grid, xi)
                sval = bmat @ edge.coeffs
                basis[j][i] = bmat
                spline_vals[j][i] = sval
                acts[:, j, i] = edge.w_base * silu[:, i] + edge.w_spline * sval
        caches.append(_LayerCache(x=x, sig=sig, acts=acts, basis=basis,
                                  spline_vals=spline_vals))
        x = acts.sum(axis=2)
    out = x[0] if single else x
    if with_cache:
        return out, ForwardCache(layers=caches, outputs=x)
    return out


def num_params(net: KanNetwork) -> int:
    return sum(e.num_params for layer in net.layers
               for row in layer.edges for e in row)


def get_params(net: KanNetwork) -> np.ndarray:
    parts = []
    for layer in net.layers:
        for row in layer.edges:
            for e in row:
                if e.trainable:
                    parts.append(e.coeffs)
                    parts.append([e.w_base, e.w_spline])
    if not parts:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def set_params(net: KanNetwork, theta: np.ndarray) -> None:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (num_params(net),):
        raise ValueError(
            f"parameter vector has {theta.size} entries, "
            f"expected {num_params(net)}")
    pos = 0
    for layer in net.layers:
        for row in layer.edges:
            for e in row:
                if not e.trainable:
                    continue
                nb = e.grid.num_basis
                e.coeffs = theta[pos:pos + nb].copy()
                e.w_base = float(theta[pos + nb])
                e.w_spline = float(theta[pos + nb + 1])
                pos += nb + 2


def backward(net: KanNetwork, cache: ForwardCache, upstream,
             edge_upstream=None, need_input_grad: bool = False):
    """Gradients of ``sum(upstream * outputs)`` plus optional per-edge terms.

    ``edge_upstream``, when given, adds a direct sensitivity to every edge
    activation (one ``(N, out, in)`` array per layer) on top of whatever
    flows back from the outputs; this is how the sparsity penalty couples
    into inner layers. Returns ``(param_grad, input_grad_or_None)``.
    """
    up = np.asarray(upstream, dtype=float)
    if up.ndim == 1:
        up = up[:, None] if net.shape[-1] == 1 else np.atleast_2d(up)
    if up.shape != cache.outputs.shape:
        raise ValueError(
            f"upstream shape {up.shape} does not match outputs "
            f"{cache.outputs.shape}")
    grads = {}
    g_out = up
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        lc = cache.layers[l]
        silu = lc.x * lc.sig
        dsilu = lc.sig * (1.0 + lc.x * (1.0 - lc.sig))
        want_gx = l > 0 or need_input_grad
        gx = np.zeros_like(lc.x) if want_gx else None
        for j, row in enumerate(layer.edges):
            go_base = g_out[:, j]
            for i, edge in enumerate(row):
                go = go_base
                if edge_upstream is not None and edge_upstream[l] is not None:
                    go = go + edge_upstream[l][:, j, i]
                xi = lc.x[:, i]
                if edge.symbolic is not None:
                    if want_gx:
                        gx[:, i] += go * edge.symbolic.eval_deriv(xi)
                    continue
                bmat = lc.basis[j][i]
                grads[(l, j, i)] = np.concatenate([
                    edge.w_spline * (bmat.T @ go),
                    [go @ silu[:, i], go @ lc.spline_vals[j][i]],
                ])
                if want_gx:
                    dspline = basis_derivative_matrix(edge.grid, xi) @ edge.coeffs
                    gx[:, i] += go * (edge.w_base * dsilu[:, i]
                                      + edge.w_spline * dspline)
        g_out = gx
    parts = []
    for l, layer in enumerate(net.layers):
        for j, row in enumerate(layer.edges):
            for i, e in enumerate(row):
                if e.trainable:
                    parts.append(grads[(l, j, i)])
    pgrad = (np.concatenate(parts) if parts else np.zeros(0))
    return pgrad, (g_out if need_input_grad else None)


@dataclass
class ActivationStats:
    """Mean absolute edge activations over a batch, one array per layer."""

    edge_means: list  # [layer] -> (out_dim, in_dim)
    batch_size: int

    def input_scores(self) -> np.ndarray:
        """Largest first-layer edge mean per input column."""
        return self.edge_means[0].max(axis=0)

    def node_scores(self, boundary: int) -> np.ndarray:
        """min(max incoming, max outgoing) per hidden node at a boundary.

        ``boundary`` counts layer boundaries, so valid values are
        ``1 .. len(layers) - 1``.
        """
        incoming = self.edge_means[boundary - 1].max(axis=1)
        outgoing = self.edge_means[boundary].max(axis=0)
        return np.minimum(incoming, outgoing)


def activation_stats(net: KanNetwork, inputs) -> ActivationStats:
    _, cache = forward(net, np.atleast_2d(np.asarray(inputs, dtype=float)),
                       with_cache=True)
    return stats_from_cache(cache)


def stats_from_cache(cache: ForwardCache) -> ActivationStats:
    means = [np.abs(lc.acts).mean(axis=0) for lc in cache.layers]
    return ActivationStats(edge_means=means,
                           batch_size=cache.outputs.shape[0])


def regularization(stats: ActivationStats, lamb: float,
                   lamb_entropy: float) -> float:
    """Sparsity penalty lamb * sum_layers(L1 + lamb_entropy * entropy)."""
    total = 0.0
    for means in stats.edge_means:
        l1 = float(means.sum())
        if l1 == 0.0:
            continue
        p = means.ravel() / l1
        p = p[p > 0]
        entropy = float(-(p * np.log(p)).sum())
        total += lamb * (l1 + lamb_entropy * entropy)
    return total


def penalty_edge_upstream(cache: ForwardCache, lamb: float,
                          lamb_entropy: float):
    """Per-edge activation sensitivities of :func:`regularization`.

    Returns ``(value, upstream_list)`` where ``upstream_list[l][n, j, i]``
    is d(penalty)/d(act). Uses the subgradient convention: zero at
    phi = 0 and at zero-share edges (p = 0).
    """
    n = cache.outputs.shape[0]
    value = 0.0
    upstream = []
    for lc in cache.layers:
        means = np.abs(lc.acts).mean(axis=0)
        l1 = float(means.sum())
        if l1 == 0.0:
            upstream.append(np.zeros_like(lc.acts))
            continue
        p = means / l1
        pos = p > 0
        logp = np.zeros_like(p)
        logp[pos] = np.log(p[pos])
        entropy = float(-(p[pos] * logp[pos]).sum())
        value += lamb * (l1 + lamb_entropy * entropy)
        dpen_dmean = np.zeros_like(means)
        dpen_dmean[pos] = lamb * (1.0 - lamb_entropy
                                  * (logp[pos] + entropy) / l1)
        upstream.append(np.sign(lc.acts) * dpen_dmean[None, :, :] / n)
    return value, upstream


def prune(net: KanNetwork, stats: ActivationStats,
          node_threshold: float) -> KanNetwork:
    """Drop hidden nodes whose best incoming or outgoing edge is quiet.

    The pruned network's forward pass equals the original's with the
    removed nodes' activations forced to zero.
    """
    if len(stats.edge_means) != len(net.layers):
        raise ValueError("stats do not match network depth")
    keep = [list(range(net.shape[0]))]
    for boundary in range(1, len(net.shape) - 1):
        scores = stats.node_scores(boundary)
        kept = [i for i, s in enumerate(scores) if s >= node_threshold]
        keep.append(kept)
    keep.append(list(range(net.shape[-1])))
    layers = []
    for l, layer in enumerate(net.layers):
        rows = []
        for j in keep[l + 1]:
            rows.append([copy.deepcopy(layer.edges[j][i]) for i in keep[l]])
        layers.append(KanLayer(in_dim=len(keep[l]), out_dim=len(keep[l + 1]),
                               edges=rows))
    return KanNetwork(shape=[len(k) for k in keep], layers=layers,
                      input_labels=list(net.input_labels), seed=net.seed,
                      ts_seconds=net.ts_seconds)


def _edge_samples(net: KanNetwork, layer: int, out_index: int,
                  in_index: int, inputs):
    if not (0 <= layer < len(net.layers)):
        raise ValueError(f"layer {layer} out of range")
    lay = net.layers[layer]
    if not (0 <= out_index < lay.out_dim and 0 <= in_index < lay.in_dim):
        raise ValueError(
            f"edge ({out_index}, {in_index}) out of range for layer {layer}")
    _, cache = forward(net, np.atleast_2d(np.asarray(inputs, dtype=float)),
                       with_cache=True)
    lc = cache.layers[layer]
    return lc.x[:, in_index], lc.acts[:, out_index, in_index]


def suggest_symbolic(net: KanNetwork, layer: int, out_index: int,
                     in_index: int, inputs,
                     library=DEFAULT_LIBRARY) -> list[SymbolicFit]:
    """Ranked symbolic candidates for one edge, sampled on a network batch."""
    x, y = _edge_samples(net, layer, out_index, in_index, inputs)
    return suggest_primitives(x, y, library)


def fix_symbolic(net: KanNetwork, layer: int, out_index: int, in_index: int,
                 primitive: str, inputs) -> float:
    """Freeze one edge to a fitted primitive; returns the fit R^2."""
    x, y = _edge_samples(net, layer, out_index, in_index, inputs)
    fit = fit_primitive(x, y, primitive)
    net.layers[layer].edges[out_index][in_index].symbolic = fit.as_override()
    return fit.r2


def apply_override(net: KanNetwork, layer: int, out_index: int,
                   in_index: int, override: SymbolicOverride) -> None:
    net.layers[layer].edges[out_index][in_index].symbolic = override


def fix_input_zero(net: KanNetwork, input_index: int) -> None:
    """Hard-zero every first-layer edge leaving one input column."""
    if not (0 <= input_index < net.shape[0]):
        raise ValueError(f"input index {input_index} out of range")
    for row in net.layers[0].edges:
        row[input_index].symbolic = SymbolicOverride("zero", 1.0, 0.0, 0.0,
                                                     0.0)


def scale_output(net: KanNetwork, factor: float) -> None:
    """Multiply the network's output by ``factor``, exactly, in place.

    Works on the last layer only: node outputs are plain sums of edge
    activations, so scaling each edge's ``w_base``/``w_spline`` (or, for a
    fixed edge, its ``c``/``d``) scales the sum with no approximation. Used
    to fold a target normalization back out of a trained network.
    """
    factor = float(factor)
    if not np.isfinite(factor):
        raise ValueError(f"scale factor must be finite, got {factor}")
    for row in net.layers[-1].edges:
        for edge in row:
            if edge.symbolic is None:
                edge.w_base *= factor
                edge.w_spline *= factor
            else:
                edge.symbolic = SymbolicOverride(
                    edge.symbolic.primitive, edge.symbolic.a,
                    edge.symbolic.b, edge.symbolic.c * factor,
                    edge.symbolic.d * factor)


def to_equation(net: KanNetwork, state_label: str = "",
                edge_r2=None) -> SymbolicEquation:
    """Fold a fully affine-symbolic network into a closed-form equation."""
    offenders = []
    maps = []
    for l, layer in enumerate(net.layers):
        w = np.zeros((layer.out_dim, layer.in_dim))
        b = np.zeros(layer.out_dim)
        for j, row in enumerate(layer.edges):
            for i, edge in enumerate(row):
                sym = edge.symbolic
                if sym is None:
                    offenders.append((l, j, i, "unfixed spline edge"))
                    continue
                prim = PRIMITIVES[sym.primitive]
                if not prim.affine:
                    offenders.append(
                        (l, j, i, f"primitive '{sym.primitive}' is not affine"))
                    continue
                if sym.primitive == "zero":
                    slope, offset = 0.0, sym.d
                elif sym.primitive == "constant":
                    slope, offset = 0.0, sym.c + sym.d
                else:  # linear: c*(a*x + b) + d
                    slope, offset = sym.c * sym.a, sym.c * sym.b + sym.d
                w[j, i] = slope
                b[j] += offset
        maps.append((w, b))
    if offenders:
        listing = "; ".join(
            f"layer {l} edge ({j},{i}): {why}" for l, j, i, why in offenders)
        raise NotSymbolicError(
            f"network is not fully symbolic: {listing}", edges=offenders)
    return fold_affine_layers(maps, net.input_labels, state_label,
                              edge_r2=edge_r2)


def _edge_to_dict(edge: SplineEdge) -> dict:
    doc = {
        "grid": {
            "order": edge.grid.order,
            "intervals": edge.grid.num_intervals,
            "min": edge.grid.range_min,
            "max": edge.grid.range_max,
        },
        "coeffs": [float(c) for c in edge.coeffs],
        "w_base": edge.w_base,
        "w_spline": edge.w_spline,
    }
    if edge.symbolic is not None:
        s = edge.symbolic
        doc["symbolic"] = {"primitive": s.primitive, "a": s.a, "b": s.b,
                           "c": s.c, "d": s.d}
    return doc


def model_to_dict(net: KanNetwork) -> dict:
    """JSON-ready document; layer edges are flattened row-major [out][in]."""
    return {
        "shape": list(net.shape),
        "input_labels": list(net.input_labels),
        "seed": net.seed,
        "ts_seconds": net.ts_seconds,
        "layers": [
            {"edges": [_edge_to_dict(e) for row in layer.edges for e in row]}
            for layer in net.layers
        ],
    }


def _need(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"missing field '{key}' in {where}")
    return doc[key]


def model_from_dict(doc: dict) -> KanNetwork:
    shape = [int(s) for s in _need(doc, "shape", "model")]
    labels = list(_need(doc, "input_labels", "model"))
    seed = int(_need(doc, "seed", "model"))
    ts = _need(doc, "ts_seconds", "model")
    ts = None if ts is None else float(ts)
    layer_docs = _need(doc, "layers", "model")
    if len(shape) < 2:
        raise ModelFormatError(f"model shape {shape} is too short")
    if len(layer_docs) != len(shape) - 1:
        raise ModelFormatError(
            f"{len(layer_docs)} layers for shape {shape}")
    layers = []
    for l, ldoc in enumerate(layer_docs):
        in_dim, out_dim = shape[l], shape[l + 1]
        edocs = _need(ldoc, "edges", f"layer {l}")
        if len(edocs) != in_dim * out_dim:
            raise ModelFormatError(
                f"layer {l} has {len(edocs)} edges, expected "
                f"{in_dim * out_dim}")
        rows = []
        for j in range(out_dim):
            row = []
            for i in range(in_dim):
                edoc = edocs[j * in_dim + i]
                where = f"layer {l} edge {j * in_dim + i}"
                gdoc = _need(edoc, "grid", where)
                grid = make_uniform_grid(
                    float(_need(gdoc, "min", where + " grid")),
                    float(_need(gdoc, "max", where + " grid")),
                    int(_need(gdoc, "intervals", where + " grid")),
                    int(_need(gdoc, "order", where + " grid")))
                coeffs = np.asarray(_need(edoc, "coeffs", where), dtype=float)
                if coeffs.shape != (grid.num_basis,):
                    raise ModelFormatError(
                        f"{where} has {coeffs.size} coeffs, expected "
                        f"{grid.num_basis}")
                sym = None
                if "symbolic" in edoc and edoc["symbolic"] is not None:
                    sdoc = edoc["symbolic"]
                    name = _need(sdoc, "primitive", where + " symbolic")
                    if name not in PRIMITIVES:
                        raise ModelFormatError(
                            f"{where} has unknown primitive '{name}'")
                    sym = SymbolicOverride(
                        name,
                        float(_need(sdoc, "a", where + " symbolic")),
                        float(_need(sdoc, "b", where + " symbolic")),
                        float(_need(sdoc, "c", where + " symbolic")),
                        float(_need(sdoc, "d", where + " symbolic")))
                row.append(SplineEdge(
                    grid=grid, coeffs=coeffs,
                    w_base=float(_need(edoc, "w_base", where)),
                    w_spline=float(_need(edoc, "w_spline", where)),
                    symbolic=sym))
            rows.append(row)
        layers.append(KanLayer(in_dim=in_dim, out_dim=out_dim, edges=rows))
    if len(labels) != shape[0]:
        raise ModelFormatError(
            f"{len(labels)} input labels for {shape[0]} inputs")
    return KanNetwork(shape=shape, layers=layers, input_labels=labels,
                      seed=seed, ts_seconds=ts)


def save_model(net: KanNetwork, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(net), indent=2) + "\n")


def load_model(path) -> KanNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"model file is not valid JSON: {exc}")
    return model_from_dict(doc)
