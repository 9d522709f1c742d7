"""Adam optimisation, the outer training loop, metric logging, checkpoints.

One training step:

1. draw the step's noise and estimate the batch constraint C_ba with current
   parameters,
2. advance the schedule (EMA of the constraint, phase flip, beta move), which
   also names the network groups to optimise,
3. build the objective with the fresh beta, backprop, clip the global
   gradient norm, and apply Adam to the in-scope parameters only.

Checkpoints store the full architecture, parameters, Adam state, schedule
state, and generator state, so a resumed run continues bit-identically when
saved at an epoch boundary.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math

import numpy as np

from .diffcore import (
    DenseLayer, GatedDenseLayer, NonFiniteError, ShapeError, Tape,
)
from .pendulum import FormatError, atomic_write_bytes
from .schedule import ScheduleConfig, ScheduleState, initial_state, schedule_step
from .stochastic import (
    BernoulliNet, GaussianNet, VhpModel, reconstruction_cost, vhp_loss,
)

CHECKPOINT_MAGIC = b"VHPC1"
METRIC_HEADER = "step,epoch,beta,c_hat,recon,kl,phase"


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite during training."""


@dataclasses.dataclass
class TrainConfig:
    """Optimiser and loop hyperparameters."""

    epochs: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    grad_clip: float = 100.0
    inner_steps_per_outer: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if not (self.grad_clip > 0):
            raise ValueError("grad_clip must be positive")
        if self.inner_steps_per_outer < 1:
            raise ValueError("inner_steps_per_outer must be >= 1")


class AdamState:
    """First/second moment accumulators with a per-parameter step count."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.moments = {}
        self.counts = {}

    def slot(self, name, shape):
        if name not in self.moments:
            self.moments[name] = [np.zeros(shape), np.zeros(shape)]
            self.counts[name] = 0
        m, v = self.moments[name]
        if m.shape != tuple(shape):
            raise ShapeError(f"Adam slot '{name}' has shape {m.shape}, "
                             f"parameter has {tuple(shape)}")
        return m, v


def adam_step(named_params, grads, state):
    """Bias-corrected Adam update, in place, for the given (name, array) pairs."""
    for name, param in named_params:
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter "
                             f"shape {param.shape} for '{name}'")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        m, v = state.slot(name, param.shape)
        state.counts[name] += 1
        t = state.counts[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class _NoiseReplay:
    """Feeds pre-drawn normal arrays to an objective in call order."""

    def __init__(self, arrays):
        self._arrays = list(arrays)

    def standard_normal(self, shape):
        a = self._arrays.pop(0)
        if a.shape != tuple(shape):
            raise ShapeError(f"noise replay shape {a.shape} != {tuple(shape)}")
        return a


class Trainer:
    """Owns a model plus all mutable training state."""

    def __init__(self, model, schedule_cfg, train_cfg, rng=None,
                 adam=None, schedule_state=None, step=0, epoch=0):
        self.model = model
        self.schedule_cfg = schedule_cfg
        self.train_cfg = train_cfg
        self.rng = rng if rng is not None else np.random.default_rng(train_cfg.seed)
        self.adam = adam if adam is not None else AdamState(train_cfg.learning_rate)
        self.schedule_state = (schedule_state if schedule_state is not None
                               else initial_state(schedule_cfg))
        self.step = int(step)
        self.epoch = int(epoch)
        self.history = []
        self._scope = None

    def step_batch(self, batch):
        """One optimisation step on one batch; appends a metric row."""
        batch = np.asarray(batch, dtype=np.float64)
        n = batch.shape[0]
        model = self.model
        k = model.iw_samples
        eps_z = self.rng.standard_normal((n, model.dim_z))
        eps_zeta = self.rng.standard_normal((n * k, model.dim_zeta))

        try:
            if self.step % self.train_cfg.inner_steps_per_outer == 0 \
                    or self._scope is None:
                # tape-checked forward: a non-finite estimate aborts with the
                # offending op instead of poisoning the schedule
                pre = Tape()
                q = model.encoder(pre.tensor(batch))
                z = q.sample(eps_z)
                cost = reconstruction_cost(batch, model.decoder(z))
                c_ba = float(np.mean(cost.data))
                self.schedule_state, self._scope = schedule_step(
                    self.schedule_state, c_ba, self.schedule_cfg)

            state = self.schedule_state
            bound = vhp_loss(model, batch, state.beta, state.phase,
                             _NoiseReplay([eps_z, eps_zeta]))
            grads_all = bound.tape.backward(bound.total)

            named, grads = [], {}
            for name, arr in model.parameters():
                if name.split(".", 1)[0] not in self._scope:
                    continue
                leaf = bound.binding.leaf_for(arr)
                if leaf is None:
                    continue
                named.append((name, arr))
                grads[name] = grads_all.wrt(leaf)
            grads, _ = clip_gradients(grads, self.train_cfg.grad_clip)
            adam_step(named, grads, self.adam)
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"step {self.step + 1} (epoch {self.epoch}): {err}") from err

        self.step += 1
        self.history.append({
            "step": self.step,
            "epoch": self.epoch,
            "beta": state.beta,
            "c_hat": state.c_t,
            "recon": bound.recon_term,
            "kl": bound.kl_term,
            "phase": state.phase,
        })

    def run(self, data, epochs=None, after_epoch=None):
        """Epochs of shuffled mini-batches; keeps the final partial batch."""
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError("data must be a non-empty (n, dim) array")
        if self.train_cfg.batch_size > data.shape[0]:
            raise ValueError("batch_size exceeds dataset size")
        epochs = self.train_cfg.epochs if epochs is None else int(epochs)
        b = self.train_cfg.batch_size
        for _ in range(epochs):
            order = self.rng.permutation(data.shape[0])
            for lo in range(0, data.shape[0], b):
                self.step_batch(data[order[lo:lo + b]])
            self.epoch += 1
            if after_epoch is not None:
                after_epoch(self)
        return self

    # --- metric log ---

    def metrics_csv(self):
        out = io.StringIO()
        out.write(METRIC_HEADER + "\n")
        for row in self.history:
            out.write(f"{row['step']},{row['epoch']},{row['beta']!r},"
                      f"{row['c_hat']!r},{row['recon']!r},{row['kl']!r},"
                      f"{row['phase']}\n")
        return out.getvalue()

    def save_metrics(self, path):
        atomic_write_bytes(path, self.metrics_csv().encode("ascii"))

    # --- checkpointing ---

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def _describe_layer(layer):
    if isinstance(layer, GatedDenseLayer):
        return {"kind": "gated", "n_in": layer.n_in, "n_out": layer.n_out,
                "activation": layer.value.activation}
    return {"kind": "dense", "n_in": layer.n_in, "n_out": layer.n_out,
            "activation": layer.activation}


def _build_layer(desc):
    n_in, n_out = int(desc["n_in"]), int(desc["n_out"])
    dense = lambda act: DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), act)
    if desc["kind"] == "gated":
        return GatedDenseLayer(dense(desc["activation"]), dense("sigmoid"))
    if desc["kind"] == "dense":
        return dense(desc["activation"])
    raise FormatError(f"unknown layer kind '{desc['kind']}'")


def _describe_net(net):
    if isinstance(net, BernoulliNet):
        return {"family": "bernoulli",
                "trunk": [_describe_layer(l) for l in net.trunk],
                "head": _describe_layer(net.logits_head)}
    return {"family": "gaussian",
            "trunk": [_describe_layer(l) for l in net.trunk],
            "head": _describe_layer(net.mean_head),
            "log_std_range": list(net.log_std_range) if net.log_std_range else None}


def _build_net(desc):
    trunk = [_build_layer(d) for d in desc["trunk"]]
    head = _build_layer(desc["head"])
    if desc["family"] == "bernoulli":
        return BernoulliNet(trunk, head)
    if desc["family"] == "gaussian":
        rng_range = desc.get("log_std_range")
        return GaussianNet(trunk, head, _build_layer(desc["head"]),
                           tuple(rng_range) if rng_range else None)
    raise FormatError(f"unknown net family '{desc['family']}'")


def describe_model(model):
    return {
        "iw_samples": model.iw_samples,
        "encoder": _describe_net(model.encoder),
        "decoder": _describe_net(model.decoder),
        "prior_encoder": _describe_net(model.prior_encoder),
        "prior_decoder": _describe_net(model.prior_decoder),
    }


def build_model(desc):
    return VhpModel(_build_net(desc["encoder"]), _build_net(desc["decoder"]),
                    _build_net(desc["prior_encoder"]),
                    _build_net(desc["prior_decoder"]),
                    int(desc["iw_samples"]))


def _json(value):
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, trainer):
    """Magic, text header (one `key: json` line each), blank line, f64 blobs."""
    model = trainer.model
    rng_state = trainer.rng.bit_generator.state
    header_lines = [
        "format: 1",
        f"architecture: {_json(describe_model(model))}",
        f"schedule_config: {_json(dataclasses.asdict(trainer.schedule_cfg))}",
        f"train_config: {_json(dataclasses.asdict(trainer.train_cfg))}",
        f"schedule_state: {_json(dataclasses.asdict(trainer.schedule_state))}",
        f"rng: {_json({'bit_generator': rng_state['bit_generator'], 'state': str(rng_state['state']['state']), 'inc': str(rng_state['state']['inc']), 'has_uint32': rng_state['has_uint32'], 'uinteger': rng_state['uinteger']})}",
        f"progress: {_json({'step': trainer.step, 'epoch': trainer.epoch})}",
        f"adam: {_json({'lr': trainer.adam.lr, 'beta1': trainer.adam.beta1, 'beta2': trainer.adam.beta2, 'eps': trainer.adam.eps, 'counts': trainer.adam.counts})}",
    ]
    blobs = []
    for name, arr in model.parameters():
        header_lines.append(f"tensor: {name} {' '.join(map(str, arr.shape))}")
        blobs.append(np.asarray(arr, dtype="<f8").tobytes(order="C"))
    for name, _ in model.parameters():
        if name in trainer.adam.moments:
            m, v = trainer.adam.moments[name]
            for tag, acc in (("m", m), ("v", v)):
                header_lines.append(
                    f"tensor: adam.{tag}.{name} {' '.join(map(str, acc.shape))}")
                blobs.append(np.asarray(acc, dtype="<f8").tobytes(order="C"))
    payload = CHECKPOINT_MAGIC + b"\n" + "\n".join(header_lines).encode("ascii") \
        + b"\n\n" + b"".join(blobs)
    atomic_write_bytes(path, payload)


def _parse_header(text):
    entries = []
    for line in text.split("\n"):
        if ": " not in line:
            raise FormatError(f"malformed checkpoint header line {line!r}")
        key, value = line.split(": ", 1)
        entries.append((key, value))
    return entries


def load_checkpoint(path):
    """Rebuild a Trainer (model, optimiser, schedule, rng) from a file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic_len = len(CHECKPOINT_MAGIC) + 1
    if blob[:magic_len] != CHECKPOINT_MAGIC + b"\n":
        raise FormatError(f"bad checkpoint magic {blob[:5]!r}")
    split = blob.find(b"\n\n", magic_len)
    if split < 0:
        raise FormatError("checkpoint header is not terminated by a blank line")
    try:
        header = blob[magic_len:split].decode("ascii")
    except UnicodeDecodeError as err:
        raise FormatError("checkpoint header is not ASCII") from err
    entries = _parse_header(header)
    fields = dict(entries)
    if fields.get("format") != "1":
        raise FormatError(f"unknown checkpoint format {fields.get('format')!r}")

    model = build_model(json.loads(fields["architecture"]))
    schedule_cfg = ScheduleConfig(**json.loads(fields["schedule_config"]))
    train_cfg = TrainConfig(**json.loads(fields["train_config"]))
    schedule_state = ScheduleState(**json.loads(fields["schedule_state"]))
    progress = json.loads(fields["progress"])
    adam_meta = json.loads(fields["adam"])

    rng_meta = json.loads(fields["rng"])
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": rng_meta["bit_generator"],
        "state": {"state": int(rng_meta["state"]), "inc": int(rng_meta["inc"])},
        "has_uint32": int(rng_meta["has_uint32"]),
        "uinteger": int(rng_meta["uinteger"]),
    }
    rng = np.random.Generator(bitgen)

    adam = AdamState(adam_meta["lr"], adam_meta["beta1"], adam_meta["beta2"],
                     adam_meta["eps"])

    params = dict(model.parameters())
    tensor_entries = [(k, v) for k, v in entries if k == "tensor"]
    offset = split + 2
    arrays = {}
    for _, spec_str in tensor_entries:
        parts = spec_str.split(" ")
        name, shape = parts[0], tuple(int(x) for x in parts[1:])
        count = 1
        for d in shape:
            count *= d
        end = offset + 8 * count
        if end > len(blob):
            raise FormatError(f"checkpoint truncated in tensor '{name}'")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise FormatError("checkpoint has trailing bytes after tensors")

    for name, arr in params.items():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor '{name}'")
        if arrays[name].shape != arr.shape:
            raise FormatError(f"tensor '{name}' shape mismatch")
        arr[...] = arrays[name]
    for name in adam_meta["counts"]:
        m = arrays.get(f"adam.m.{name}")
        v = arrays.get(f"adam.v.{name}")
        if m is None or v is None or name not in params:
            raise FormatError(f"checkpoint Adam state for unknown tensor '{name}'")
        adam.moments[name] = [m, v]
        adam.counts[name] = int(adam_meta["counts"][name])

    return Trainer(model, schedule_cfg, train_cfg, rng=rng, adam=adam,
                   schedule_state=schedule_state,
                   step=int(progress["step"]), epoch=int(progress["epoch"]))
