"""Central finite-difference gradient checks for every op and gating module."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from config import EncoderConfig, GateConfig, LossConfig, ModelConfig
from encoder_decoder import decode_attention_map, encode_frame, init_decoder, init_encoder, patch_embed, vit_block
from error_handler import CheckFailure, UsageError
from gating import (
    gru_cell, init_gru, init_mo_infog, init_reducer, init_spag, memog_forward, mo_infog_forward,
    mu_infog_forward, spag_forward,
)
from param_store import ParamStore
from pipeline import GateDapModel, joint_loss
from tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

SMOOTH_TOL = 1e-6
DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-5
ABS_FLOOR = 1e-2
SHAPE_VARIANTS = 3

Closure = Callable[[], Tensor]


@dataclass
class GradCheckReport:
    """``max_error`` floors the denominator at ABS_FLOOR and decides pass/fail;
    ``max_rel_error`` is the plain |a − n| / max(|a|, |n|)."""

    name: str
    max_error: float
    max_rel_error: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def grad_check(f: Closure, inputs: Sequence[Tensor], h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
               name: str = "f", max_elements: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() against (f(x+h) − f(x−h)) / 2h for every input element.

    The error per element is |analytic − numeric| / max(|analytic|, |numeric|, 0.01);
    the report also keeps the largest unfloored relative error.
    ``max_elements`` samples that many entries per input (seeded) instead of all.
    """
    if tc.get_default_dtype() != np.float64:
        raise UsageError("gradient checks need float64 tensors")
    for x in inputs:
        x.data = np.array(x.data, dtype=np.float64)
        x.grad = None
    f().backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    rng = np.random.default_rng(seed)
    worst, worst_rel, checked = 0.0, 0.0, 0
    for x, grad in zip(inputs, analytic):
        indices = np.arange(x.size)
        if max_elements is not None and x.size > max_elements:
            indices = np.sort(rng.choice(x.size, size=max_elements, replace=False))
        flat = x.data.reshape(-1)
        for i in indices:
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            a = grad.reshape(-1)[i]
            error = abs(a - numeric) / max(abs(a), abs(numeric), ABS_FLOOR)
            worst = max(worst, error)
            scale = max(abs(a), abs(numeric))
            if scale > 0.0:
                worst_rel = max(worst_rel, abs(a - numeric) / scale)
            checked += 1
        x.grad = None
    return GradCheckReport(name=name, max_error=float(worst), max_rel_error=float(worst_rel), tol=tol,
                           checked=checked)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator, int], Tuple[Closure, List[Tensor]]]
    tol: float = DEFAULT_TOL
    variants: int = SHAPE_VARIANTS
    max_elements: Optional[int] = None


def _leaf(rng: np.random.Generator, shape, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    values = rng.uniform(low, high, size=shape) if low is not None else rng.standard_normal(shape)
    return Tensor(values, requires_grad=True)


def _random_projection(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * weights).sum()


def _scalarize(op: Callable[[], Tensor], rng: np.random.Generator) -> Closure:
    with no_grad():
        project = _random_projection(op(), rng)
    return lambda: project(op())


_ELEMENT_SHAPES = [(5,), (2, 3), (2, 3, 4)]


def _elementwise_case(kind: str, low: Optional[float] = None, high: Optional[float] = None):
    def build(rng, variant):
        x = _leaf(rng, _ELEMENT_SHAPES[variant], low, high)
        return _scalarize(lambda: tc.elementwise(kind, x), rng), [x]
    return build


_BROADCAST_PAIRS = [((4,), (4,)), ((2, 3), (3,)), ((3, 2, 2), (2, 2))]


def _binary_case(kind: str):
    def build(rng, variant):
        a_shape, b_shape = _BROADCAST_PAIRS[variant]
        a = _leaf(rng, a_shape)
        b = _leaf(rng, b_shape, 0.5, 2.0) if kind == "div" else _leaf(rng, b_shape)
        return _scalarize(lambda: tc.binary(kind, a, b), rng), [a, b]
    return build


def _matmul(rng, variant):
    a_shape, b_shape = [((3, 4), (4, 2)), ((1, 5), (5, 3)), ((2, 3, 4), (4, 2))][variant]
    a, b = _leaf(rng, a_shape), _leaf(rng, b_shape)
    return _scalarize(lambda: a @ b, rng), [a, b]


def _conv2d(rng, variant):
    x_shape, k_shape, pad = [((2, 5, 5), (3, 2, 3, 3), 0), ((1, 4, 4), (2, 1, 1, 1), 0), ((2, 4, 3), (1, 2, 3, 3), 1)][variant]
    x, k, b = _leaf(rng, x_shape), _leaf(rng, k_shape), _leaf(rng, (k_shape[0],))
    return _scalarize(lambda: tc.conv2d(x, k, b, padding=pad), rng), [x, k, b]


def _softmax(rng, variant):
    shape, axis = [((5,), 0), ((3, 4), -1), ((3, 2, 2), 0)][variant]
    x = _leaf(rng, shape)
    return _scalarize(lambda: tc.softmax(x, axis), rng), [x]


def _reduce_case(kind: str):
    def build(rng, variant):
        shape, axis = [((5,), None), ((3, 4), 0), ((2, 3, 4), 1)][variant]
        x = _leaf(rng, shape)
        return _scalarize(lambda: tc.reduce(kind, x, axis), rng), [x]
    return build


def _pool_case(kind: str):
    def build(rng, variant):
        x = _leaf(rng, [(1, 3, 3), (4, 3, 3), (2, 2, 5)][variant])
        return _scalarize(lambda: tc.pool_channel(kind, x), rng), [x]
    return build


def _concat(rng, variant):
    shapes, axis = [([(1, 2, 2), (1, 2, 2)], 0), ([(2, 3), (2, 1)], 1), ([(3,), (2,), (1,)], 0)][variant]
    xs = [_leaf(rng, s) for s in shapes]
    return _scalarize(lambda: tc.concat(xs, axis), rng), xs


def _stack(rng, variant):
    shape = [(2,), (2, 3), (1, 2, 2)][variant]
    xs = [_leaf(rng, shape) for _ in range(variant + 2)]
    return _scalarize(lambda: tc.stack(xs, 0), rng), xs


def _reshape(rng, variant):
    shape, new = [((6,), (2, 3)), ((2, 3, 4), (4, 6)), ((4, 4), (16,))][variant]
    x = _leaf(rng, shape)
    return _scalarize(lambda: tc.reshape(x, new), rng), [x]


def _transpose(rng, variant):
    shape, axes = [((2, 3), None), ((2, 3, 4), (1, 0, 2)), ((2, 3, 4), (2, 0, 1))][variant]
    x = _leaf(rng, shape)
    return _scalarize(lambda: tc.transpose(x, axes), rng), [x]


def _slice(rng, variant):
    shape, index = [((5,), slice(1, 4)), ((3, 4), 1), ((2, 3, 4), (slice(None), 2, slice(0, 2)))][variant]
    x = _leaf(rng, shape)
    return _scalarize(lambda: x[index], rng), [x]


def _upsample(rng, variant):
    x = _leaf(rng, [(1, 1, 1), (2, 2, 3), (3, 2, 2)][variant])
    return _scalarize(lambda: tc.upsample_nearest_2x(x), rng), [x]


def _batchnorm_case(mode: str):
    def build(rng, variant):
        c = [1, 2, 3][variant]
        x = _leaf(rng, (c, 3, 4))
        gamma, beta = _leaf(rng, (c,), 0.5, 1.5), _leaf(rng, (c,))
        stats = tc.RunningStats(Tensor(rng.standard_normal(c)), Tensor(rng.uniform(0.5, 2.0, c)))
        return _scalarize(lambda: tc.batchnorm2d(x, gamma, beta, stats, mode=mode), rng), [x, gamma, beta]
    return build


def _layer_norm(rng, variant):
    shape = [(4,), (3, 5), (2, 2, 6)][variant]
    x, gamma, beta = _leaf(rng, shape), _leaf(rng, shape[-1:]), _leaf(rng, shape[-1:])
    return _scalarize(lambda: tc.layer_norm(x, gamma, beta), rng), [x, gamma, beta]


def _params_of(store: ParamStore) -> List[Tensor]:
    return [t for _, t in store.items()]


def _spag(rng, variant):
    c, size, kernel = [(1, 3, 1), (3, 4, 3), (2, 5, 7)][variant]
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_spag(store, "spag", kernel)
    S = _leaf(rng, (c, size, size))
    return _scalarize(lambda: spag_forward(S, store, "spag"), rng), [S] + _params_of(store)


def _mo_infog(rng, variant):
    c, size = [(1, 2), (2, 2), (3, 3)][variant]
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_mo_infog(store, "mo", c)
    M = _leaf(rng, (c, size, size))
    return _scalarize(lambda: mo_infog_forward(M, store, "mo"), rng), [M] + _params_of(store)


def _mu_infog(rng, variant):
    n, c, size = [(1, 2, 2), (2, 2, 3), (4, 1, 2)][variant]
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    prefixes = [f"mu.{i}" for i in range(n)]
    for prefix in prefixes:
        init_reducer(store, prefix, c)
    Ms = [_leaf(rng, (c, size, size)) for _ in range(n)]

    def op():
        outputs, _ = mu_infog_forward(Ms, store, prefixes)
        return tc.concat(outputs, axis=0)

    return _scalarize(op, rng), Ms + _params_of(store)


def _gru(rng, variant):
    hidden, width = [(4, 3), (2, 5), (6, 6)][variant]
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_gru(store, "gru", width, hidden)
    for _, t in store.items():
        t.data = rng.standard_normal(t.shape) * 0.5
    H, X = _leaf(rng, (hidden,)), _leaf(rng, (width,))
    return _scalarize(lambda: gru_cell(H, X, store, "gru"), rng), [H, X] + _params_of(store)


def _memog_case(temporal_uncertainty: bool):
    def build(rng, variant):
        hidden, width, window = [(4, 3, 1), (3, 4, 2), (4, 3, 4)][variant]
        store = ParamStore(seed=int(rng.integers(1 << 30)))
        init_mo_infog(store, "memog.mo", hidden)
        init_reducer(store, "memog.tu", width)
        init_gru(store, "memog.gru", width, hidden)
        gate = GateConfig(temporal_uncertainty=temporal_uncertainty)
        H = _leaf(rng, (hidden,))
        Xs = [_leaf(rng, (width,)) for _ in range(window)]
        op = lambda: memog_forward(H, Xs, gate, store, "memog")
        params = [t for name, t in store.items() if temporal_uncertainty or ".tu." not in name]
        return _scalarize(op, rng), [H] + Xs + params
    return build


def _patch_embed(rng, variant):
    c, size, patch = [(1, 8, 8), (3, 16, 8), (2, 8, 4)][variant]
    cfg = EncoderConfig(image_size=size, patch_size=patch, embed_dim=4, depth=0, num_heads=1)
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_encoder(store, cfg, c)
    frame = _leaf(rng, (c, size, size))
    return _scalarize(lambda: patch_embed(frame, store, patch), rng), [frame] + _params_of(store)


def _vit_block(rng, variant):
    tokens, dim, heads = [(1, 4, 1), (4, 4, 2), (3, 6, 3)][variant]
    cfg = EncoderConfig(image_size=4, patch_size=2, embed_dim=dim, depth=1, num_heads=heads)
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_encoder(store, cfg, 1)
    for name, t in store.items():
        if name.endswith((".wq", ".wk", ".wv", ".wo", ".w1", ".w2")):
            t.data = rng.standard_normal(t.shape) * 0.5
    x = _leaf(rng, (tokens, dim))
    params = [t for name, t in store.items() if ".blocks.0." in name]
    return _scalarize(lambda: vit_block(x, store, "encoder.blocks.0", heads), rng), [x] + params


def _encoder(rng, variant):
    size, patch, dim = [(4, 2, 4), (8, 4, 4), (4, 4, 2)][variant]
    cfg = EncoderConfig(image_size=size, patch_size=patch, embed_dim=dim, depth=1, num_heads=2 if dim % 2 == 0 else 1)
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_encoder(store, cfg, 2)
    frame = _leaf(rng, (2, size, size))
    return _scalarize(lambda: encode_frame(frame, cfg, store), rng), [frame] + _params_of(store)


def _decoder(rng, variant):
    channels, size, blocks = [(2, 2, 1), (3, 1, 2), (1, 2, 2)][variant]
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    init_decoder(store, channels, 3, blocks)
    M = _leaf(rng, (channels, size, size))
    return _scalarize(lambda: decode_attention_map(M, store, blocks, mode="eval"), rng), [M] + _params_of(store)


def _joint_loss(rng, variant):
    size = [3, 4, 6][variant]
    Y = rng.uniform(0.0, 1.0, (size, size))
    Y /= Y.sum()
    P = np.zeros((size, size))
    P.reshape(-1)[rng.choice(size * size, size=variant + 1, replace=False)] = 1.0
    Y_hat = _leaf(rng, (size, size), 0.05, 0.95)
    cfg = LossConfig(alpha=0.5, beta=0.3)
    return (lambda: joint_loss(Y_hat, Y, P, cfg).total), [Y_hat]


def _gate_dap(rng, variant):
    gate = [GateConfig(), GateConfig(temporal_uncertainty=False),
            GateConfig(spag=False, memog=False, mu_infog=False)][variant]
    cfg = ModelConfig(encoder=EncoderConfig(image_size=4, patch_size=2, embed_dim=4, depth=1, num_heads=2),
                      gate=gate, clip_len=2, info_types=["rgb", "flow"], in_channels=2, gru_input=3,
                      gru_hidden=3, memory_channels=2, spag_kernel=3, decoder_width=3)
    model = GateDapModel(cfg, ParamStore(seed=int(rng.integers(1 << 30))))
    inputs = {"rgb": rng.uniform(0, 1, (2, 3, 4, 4)), "flow": rng.uniform(-1, 1, (2, 2, 4, 4))}
    inactive = model.inactive_parameters()
    params = [t for name, t in model.store.items() if name not in inactive]
    op = lambda: model.forward_clip(inputs, mode="eval")
    return _scalarize(op, rng), params


def _registry() -> Dict[str, GradCase]:
    cases = [
        GradCase("sigmoid", _elementwise_case("sigmoid"), SMOOTH_TOL),
        GradCase("tanh", _elementwise_case("tanh"), SMOOTH_TOL),
        GradCase("exp", _elementwise_case("exp"), SMOOTH_TOL),
        GradCase("gelu", _elementwise_case("gelu"), SMOOTH_TOL),
        GradCase("square", _elementwise_case("square"), SMOOTH_TOL),
        GradCase("negate", _elementwise_case("negate"), SMOOTH_TOL),
        GradCase("log", _elementwise_case("log", 0.5, 2.0), SMOOTH_TOL),
        GradCase("sqrt", _elementwise_case("sqrt", 0.5, 2.0), SMOOTH_TOL),
        GradCase("elu", _elementwise_case("elu")),
        GradCase("relu", _elementwise_case("relu")),
        GradCase("add", _binary_case("add"), SMOOTH_TOL),
        GradCase("sub", _binary_case("sub"), SMOOTH_TOL),
        GradCase("hadamard", _binary_case("hadamard"), SMOOTH_TOL),
        GradCase("div", _binary_case("div"), SMOOTH_TOL),
        GradCase("matmul", _matmul, SMOOTH_TOL),
        GradCase("conv2d", _conv2d, SMOOTH_TOL),
        GradCase("softmax", _softmax, SMOOTH_TOL),
        GradCase("sum", _reduce_case("sum"), SMOOTH_TOL),
        GradCase("mean", _reduce_case("mean"), SMOOTH_TOL),
        GradCase("max", _reduce_case("max")),
        GradCase("pool_avg", _pool_case("avg"), SMOOTH_TOL),
        GradCase("pool_max", _pool_case("max")),
        GradCase("concat", _concat, SMOOTH_TOL),
        GradCase("stack", _stack, SMOOTH_TOL),
        GradCase("reshape", _reshape, SMOOTH_TOL),
        GradCase("transpose", _transpose, SMOOTH_TOL),
        GradCase("slice", _slice, SMOOTH_TOL),
        GradCase("upsample", _upsample, SMOOTH_TOL),
        GradCase("batchnorm_train", _batchnorm_case("train")),
        GradCase("batchnorm_eval", _batchnorm_case("eval")),
        GradCase("layer_norm", _layer_norm),
        GradCase("spag", _spag),
        GradCase("mo_infog", _mo_infog),
        GradCase("mu_infog", _mu_infog),
        GradCase("gru", _gru),
        GradCase("memog", _memog_case(True)),
        GradCase("memog_no_tu", _memog_case(False)),
        GradCase("patch_embed", _patch_embed),
        GradCase("vit_block", _vit_block),
        GradCase("encoder", _encoder),
        GradCase("decoder", _decoder),
        GradCase("joint_loss", _joint_loss),
        GradCase("gate_dap", _gate_dap, max_elements=3),
    ]
    return {case.name: case for case in cases}


GRAD_CASES: Dict[str, GradCase] = _registry()


def run_gradcheck(names: Iterable[str] = ("all",), tol: Optional[float] = None,
                  registry: Optional[Dict[str, GradCase]] = None, seed: int = 0) -> List[GradCheckReport]:
    """Run the named cases (or all) over their shape variants.

    ``tol`` overrides each case's own tolerance. Raises CheckFailure listing
    the failing cases; the reports are attached to the exception.
    """
    registry = GRAD_CASES if registry is None else registry
    names = list(names)
    selected = list(registry) if not names or "all" in names else names
    unknown = [n for n in selected if n not in registry]
    if unknown:
        raise UsageError(f"unknown gradcheck op(s) {unknown}; available: {', '.join(sorted(registry))}")

    reports = []
    with tc.default_dtype("float64"):
        for name in selected:
            case = registry[name]
            case_tol = tol if tol is not None else case.tol
            worst = None
            for variant in range(case.variants):
                rng = np.random.default_rng([seed, variant])
                f, inputs = case.build(rng, variant)
                report = grad_check(f, inputs, tol=case_tol, name=name, max_elements=case.max_elements,
                                    seed=seed + variant)
                if worst is None or report.max_error > worst.max_error:
                    worst = report
            status = "✅" if worst.passed else "❌"
            logger.info(f"{status} {name}: max error {worst.max_error:.2e}, "
                        f"max rel. error {worst.max_rel_error:.2e} (tol {case_tol:.0e})")
            reports.append(worst)

    failed = [r.name for r in reports if not r.passed]
    if failed:
        error = CheckFailure(f"gradient check failed for: {', '.join(failed)}")
        error.reports = reports
        raise error
    return reports
