"""Training machinery: mask losses, finite-difference gradient checking,
the deterministic training loop, and checkpoint/log I/O.

Checkpoint format (documented in the README): an ASCII header holding the
model config and one `tensor <name> <shape> <byte-offset>` line per
parameter, a `data` separator line, then the raw little-endian float32
tensor data concatenated in header order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .features import stack_features
from .model import (
    ContextBundle,
    FrontendModel,
    ModelConfig,
    build_model,
    random_trim_noise_context,
    signal_dropout,
    zero_fill_bundle,
)
from .validation import ShapeError, check_probability

CHECKPOINT_MAGIC = "ctxse-checkpoint-v1"
SIGNAL_NAMES = ("playback", "noise_context", "dvector")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    l1_weight: float = 1.0
    l2_weight: float = 1.0
    # Signals zero-filled on every step, for dedicated models trained
    # entirely without one context signal.
    always_drop: tuple = ()

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        for name in self.always_drop:
            if name not in SIGNAL_NAMES:
                raise ValueError(f"unknown signal {name!r} in always_drop")
        return self


def mask_loss(est, ideal, l1_weight=1.0, l2_weight=1.0):
    """Weighted L1 + L2 distance between estimated and ideal masks.

    Returns a scalar tensor: l1_weight * mean|est - ideal| +
    l2_weight * mean((est - ideal)^2). Zero iff the masks are equal.
    """
    est_t = torch.as_tensor(est)
    ideal_t = torch.as_tensor(ideal, dtype=est_t.dtype)
    if est_t.shape != ideal_t.shape:
        raise ShapeError(f"mask shapes differ: {tuple(est_t.shape)} vs {tuple(ideal_t.shape)}")
    diff = est_t - ideal_t
    return l1_weight * diff.abs().mean() + l2_weight * diff.square().mean()


def model_parameters(model) -> dict:
    return dict(model.named_parameters())


def analytic_gradients(fn, params) -> dict:
    """Reverse-mode gradients of the scalar fn() w.r.t. each named tensor."""
    for p in params.values():
        p.grad = None
    loss = fn()
    if not torch.isfinite(loss):
        raise ValueError(
            f"non-finite loss {float(loss.detach())} during gradient evaluation"
        )
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }


def numeric_gradients(fn, params, eps=1e-5) -> dict:
    """Central finite differences, (f(p + eps) - f(p - eps)) / (2 eps), per element."""
    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            grad = torch.zeros_like(p)
            flat, grad_flat = p.reshape(-1), grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(f"non-finite loss while perturbing {name}[{i}]")
                grad_flat[i] = (f_plus - f_minus) / (2.0 * eps)
            grads[name] = grad
    return grads


def functional_loss(module, args, readout=None):
    """Wrap a module as a pure function of its parameter dict.

    The returned callable evaluates the module with the given parameters via
    torch.func.functional_call; tuple outputs use their first element, and
    `readout` (default: a fixed linear functional) reduces non-scalar outputs.
    """
    buffers = dict(module.named_buffers())

    def forward(params):
        out = torch.func.functional_call(module, {**params, **buffers}, args)
        if isinstance(out, tuple):
            out = out[0]
        if out.ndim == 0:
            return out
        flat = out.reshape(-1)
        if readout is not None:
            return readout(flat)
        weights = torch.linspace(-1.0, 1.0, flat.numel(), dtype=flat.dtype)
        return flat @ weights

    return forward


def numeric_gradients_batched(forward, params, eps=1e-5, chunk=512) -> dict:
    """Central differences of forward(params), vmapped over perturbations.

    Same difference quotient as numeric_gradients; perturbed parameter copies
    are evaluated in batches so the per-call dispatch overhead is amortized.
    """
    base = {name: p.detach() for name, p in params.items()}
    grads = {}
    for name, p in base.items():
        flat = p.reshape(-1)
        count = flat.numel()
        grad = torch.zeros_like(flat)
        for start in range(0, count, chunk):
            idx = torch.arange(start, min(start + chunk, count))
            rows = torch.arange(idx.numel())

            def eval_at(offset):
                stack = flat.unsqueeze(0).repeat(idx.numel(), 1)
                stack[rows, idx] += offset
                run = lambda q: forward({**base, name: q.reshape(p.shape)})
                return torch.vmap(run)(stack)

            grad[idx] = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps)
        grads[name] = grad.reshape(p.shape)
        if not torch.all(torch.isfinite(grads[name])):
            raise ValueError(f"non-finite finite-difference gradient for {name}")
    return grads


def grad_check_functional(module, args, eps=1e-5, readout=None) -> float:
    """grad_check for a whole module, with the batched difference path."""
    forward = functional_loss(module, args, readout)
    params = model_parameters(module)
    for p in params.values():
        p.grad = None
    loss = forward(params)
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss during gradient evaluation")
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))
                for name, p in params.items()}
    numeric = numeric_gradients_batched(forward, params, eps)
    return max_relative_error(analytic, numeric)


def max_relative_error(grads_a, grads_b) -> float:
    """max over elements of |a - b| / max(|a|, |b|, 1e-8) across matching tensors."""
    if set(grads_a) != set(grads_b):
        raise ValueError("gradient dictionaries hold different tensors")
    worst = 0.0
    for name, a in grads_a.items():
        b = grads_b[name]
        denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=1e-8)
        worst = max(worst, float(((a - b).abs() / denom).max()))
    return worst


def grad_check(fn, params, eps=1e-5) -> float:
    """Compare reverse-mode gradients of fn against central differences.

    Run in float64: the eps**2 truncation error of the central difference is
    otherwise indistinguishable from float32 roundoff.
    """
    return max_relative_error(analytic_gradients(fn, params),
                              numeric_gradients(fn, params, eps))


def make_optimizer(model, cfg: TrainConfig):
    cfg.validate()
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                betas=(cfg.beta1, cfg.beta2))
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


def _drop_probs(dropout_prob, always_drop):
    check_probability(dropout_prob, "dropout_prob")
    return tuple(1.0 if name in always_drop else dropout_prob for name in SIGNAL_NAMES)


def example_loss(model, example, l1_weight=1.0, l2_weight=1.0, bundle=None):
    """Forward one example (zero-filling absent signals) and return the mask loss."""
    cfg = model.config
    bundle = example.bundle if bundle is None else bundle
    bundle = zero_fill_bundle(bundle, example.noisy.shape[0],
                              num_channels=cfg.num_channels,
                              context_frames=cfg.context_fill_frames,
                              dvector_dim=cfg.dvector_dim)
    stacked = torch.as_tensor(stack_features(example.noisy, bundle.playback),
                              dtype=model.dtype)
    ctx = torch.as_tensor(bundle.noise_context, dtype=model.dtype)
    dvec = torch.as_tensor(bundle.dvector, dtype=model.dtype)
    est = model(stacked, ctx, dvec)
    return mask_loss(est, torch.as_tensor(example.ideal_mask, dtype=model.dtype),
                     l1_weight, l2_weight)


def train_step(model, batch, optimizer, cfg: TrainConfig, rng) -> float:
    """One optimizer update over a batch.

    Per example: randomly trim the noise context (suffix kept), apply signal
    dropout at the model's configured probability, run the forward pass, and
    accumulate the mask loss. The mean batch loss is backpropagated and one
    update applied. Augmentation draws come only from `rng`, in a fixed
    order, so a seeded generator reproduces the step exactly.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    mcfg = model.config
    probs = _drop_probs(mcfg.dropout_prob, cfg.always_drop)
    loss_sum = None
    optimizer.zero_grad()
    for example in batch:
        ctx = example.bundle.noise_context
        trimmed = (random_trim_noise_context(ctx, rng, mcfg.context_fill_frames)
                   if ctx is not None else None)
        bundle = ContextBundle(playback=example.bundle.playback,
                               noise_context=trimmed,
                               dvector=example.bundle.dvector)
        bundle = signal_dropout(bundle, probs, rng,
                                utterance_frames=example.noisy.shape[0],
                                num_channels=mcfg.num_channels,
                                context_frames=mcfg.context_fill_frames,
                                dvector_dim=mcfg.dvector_dim)
        stacked = torch.as_tensor(stack_features(example.noisy, bundle.playback),
                                  dtype=model.dtype)
        ctx_t = torch.as_tensor(bundle.noise_context, dtype=model.dtype)
        dvec_t = torch.as_tensor(bundle.dvector, dtype=model.dtype)
        est = model(stacked, ctx_t, dvec_t)
        loss_i = mask_loss(est, torch.as_tensor(example.ideal_mask, dtype=model.dtype),
                           cfg.l1_weight, cfg.l2_weight)
        loss_sum = loss_i if loss_sum is None else loss_sum + loss_i
    loss = loss_sum / len(batch)
    if not torch.isfinite(loss):
        ids = [example.seed for example in batch]
        raise RuntimeError(f"non-finite loss {float(loss)} on examples {ids}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def fit(model, examples, cfg: TrainConfig, log_path=None) -> list:
    """Deterministic training loop; returns the per-step loss history.

    Batch sampling and augmentation use two independent generators spawned
    from cfg.seed, so runs with identical seeds, examples, and initial
    parameters reproduce bitwise.
    """
    cfg.validate()
    if len(examples) == 0:
        raise ValueError("need at least one training example")
    batch_seed, augment_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(batch_seed)
    augment_rng = np.random.default_rng(augment_seed)
    optimizer = make_optimizer(model, cfg)
    history = []
    writer = None
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new_file = not log_path.exists()
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new_file:
            writer.writerow(["step", "loss", "lr", "seed"])
    try:
        for step in range(cfg.steps):
            idx = batch_rng.integers(0, len(examples), size=cfg.batch_size)
            batch = [examples[i] for i in idx]
            try:
                loss = train_step(model, batch, optimizer, cfg, augment_rng)
            except RuntimeError as err:
                raise RuntimeError(f"step {step}: {err}") from err
            history.append(loss)
            if writer is not None:
                writer.writerow([step, f"{loss:.6f}", cfg.learning_rate, cfg.seed])
    finally:
        if log_file is not None:
            log_file.close()
    return history


def evaluate_loss(model, examples, l1_weight=1.0, l2_weight=1.0) -> float:
    """Mean mask loss over examples with all available context (no dropout)."""
    with torch.no_grad():
        losses = [float(example_loss(model, ex, l1_weight, l2_weight)) for ex in examples]
    return float(np.mean(losses))


def gradient_check_report(eps=1e-5, seed=0) -> dict:
    """Finite-difference gradient checks for every block type and a tiny model.

    Everything runs in float64 with a fixed random scalar readout; returns
    the max relative error per checked component.
    """
    from .blocks import (
        ConformerBlock,
        ConvModule,
        CrossAttentionBlock,
        FeedForward,
        FilmLayer,
        MultiHeadAttention,
    )

    torch.manual_seed(seed)
    d, frames, ctx_frames, cond = 8, 6, 5, 16
    report = {}

    def scalar_readout(module, inputs):
        def fn():
            out = module(*inputs)
            if isinstance(out, tuple):
                out = out[0]
            flat = out.reshape(-1)
            weights = torch.linspace(-1.0, 1.0, flat.numel(), dtype=torch.float64)
            return flat @ weights
        return fn

    def check(name, module, *shapes):
        inputs = [torch.randn(*shape, dtype=torch.float64) for shape in shapes]
        report[name] = grad_check(scalar_readout(module, inputs),
                                  model_parameters(module), eps)

    check("film", FilmLayer(cond, d).double(), (frames, d), (cond,))
    check("self_attention", MultiHeadAttention(d, 2, causal_window=3).double(),
          (frames, d))
    check("cross_attention", MultiHeadAttention(d, 2).double(),
          (frames, d), (ctx_frames, d))
    check("feed_forward", FeedForward(d).double(), (frames, d))
    check("conv_module", ConvModule(d, kernel=3).double(), (frames, d))
    check("conformer_block",
          ConformerBlock(d, num_heads=2, conv_kernel=3, attn_window=4).double(),
          (frames, d))
    for variant in CrossAttentionBlock.VARIANTS:
        block = CrossAttentionBlock(d, cond_dim=cond, num_heads=2, conv_kernel=3,
                                    attn_window=4, variant=variant).double()
        check(f"cross_attention_block_{variant}", block,
              (frames, d), (ctx_frames, d), (cond,))

    config = ModelConfig(num_channels=d, d_model=d, num_blocks=1, num_cross_blocks=1,
                         num_heads=2, conv_kernel=3, attn_window=4, dvector_dim=cond,
                         dropout_prob=0.0, context_fill_frames=ctx_frames,
                         pe_max_len=ctx_frames + frames)
    model = build_model(config, seed=seed).double()
    stacked = torch.randn(frames, 2 * d, dtype=torch.float64)
    ctx = torch.randn(ctx_frames, d, dtype=torch.float64)
    dvec = torch.randn(cond, dtype=torch.float64)
    dvec = dvec / dvec.norm()
    target = torch.rand(frames, d, dtype=torch.float64)

    def model_fn():
        return mask_loss(model(stacked, ctx, dvec), target)

    report["full_model"] = grad_check(model_fn, model_parameters(model), eps)
    return report


def save_checkpoint(path, model: FrontendModel):
    """Write the model config and float32 parameters in the checkpoint format."""
    lines = [CHECKPOINT_MAGIC]
    for field in fields(ModelConfig):
        lines.append(f"config {field.name}={getattr(model.config, field.name)}")
    blobs = []
    offset = 0
    for name, param in model.named_parameters():
        arr = param.detach().cpu().numpy().astype("<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\ndata\n").encode("ascii"))
        fh.write(b"".join(blobs))


def _config_from_strings(kwargs) -> ModelConfig:
    defaults = ModelConfig()
    typed = {}
    for field in fields(ModelConfig):
        if field.name not in kwargs:
            continue
        raw = kwargs[field.name]
        default = getattr(defaults, field.name)
        typed[field.name] = type(default)(raw)
    return ModelConfig(**typed)


def load_checkpoint(path) -> FrontendModel:
    """Rebuild a model from a checkpoint; round-trips parameters bitwise."""
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    split = raw.find(marker)
    if split < 0:
        raise ValueError(f"{path} is not a checkpoint (missing data section)")
    header = raw[:split].decode("ascii").splitlines()
    data = raw[split + len(marker):]
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} file")
    config_kwargs = {}
    tensor_specs = []
    for line in header[1:]:
        if line.startswith("config "):
            key, value = line[len("config "):].split("=", 1)
            config_kwargs[key] = value
        elif line.startswith("tensor "):
            name, shape_s, offset_s = line[len("tensor "):].split(" ")
            shape = tuple(int(s) for s in shape_s.split(",") if s)
            tensor_specs.append((name, shape, int(offset_s)))
        else:
            raise ValueError(f"unrecognized checkpoint header line: {line!r}")
    model = FrontendModel(_config_from_strings(config_kwargs))
    params = dict(model.named_parameters())
    if set(params) != {name for name, _, _ in tensor_specs}:
        raise ValueError("checkpoint/config mismatch: tensor names do not match the model")
    for name, shape, offset in tensor_specs:
        param = params[name]
        if tuple(param.shape) != shape:
            raise ValueError(f"checkpoint/config mismatch: {name} has shape "
                             f"{shape}, model expects {tuple(param.shape)}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        with torch.no_grad():
            param.copy_(torch.from_numpy(arr.copy()))
    return model
