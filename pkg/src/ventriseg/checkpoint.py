"""Bit-stable checkpoint container.

One file holds the architecture description, every parameter and
batch-norm buffer, Adam optimizer state, the iteration counter and RNG
states.  Layout: an ASCII magic line, one JSON metadata line (sorted keys,
includes an ordered array table), then the raw little-endian array
payloads concatenated.  Identical state serializes to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nets
from .nets import Network, NetworkSpec

CHECKPOINT_MAGIC = "ventriseg-checkpoint v1"


def _tensor_to_np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy())


@dataclass
class Checkpoint:
    """In-memory checkpoint: everything needed to resume or infer."""

    spec: NetworkSpec
    model_state: dict                     # name -> numpy array (params + buffers)
    iteration: int = 0
    optimizer_state: dict | None = None   # {"steps": {...}, "arrays": {...}, "hyper": {...}}
    numpy_rng_state: dict | None = None
    torch_rng_state: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, net: Network, iteration: int = 0, optimizer=None,
                numpy_rng=None, extra: dict | None = None) -> "Checkpoint":
        model_state = {k: _tensor_to_np(v) for k, v in net.state_dict().items()}
        opt_state = None
        if optimizer is not None:
            opt_state = _capture_optimizer(net, optimizer)
        np_state = None
        if numpy_rng is not None:
            np_state = numpy_rng.bit_generator.state
        return cls(
            spec=net.spec,
            model_state=model_state,
            iteration=iteration,
            optimizer_state=opt_state,
            numpy_rng_state=np_state,
            torch_rng_state=torch.get_rng_state().numpy().copy(),
            extra=dict(extra or {}),
        )

    def build_network(self, dtype=None) -> Network:
        """Reconstruct the network with the stored parameters and buffers."""
        if dtype is None:
            dtype = torch.from_numpy(next(iter(self.model_state.values()))).dtype
            if not dtype.is_floating_point:
                dtype = torch.float32
        net = Network(self.spec, dtype=dtype)
        state = {}
        reference = net.state_dict()
        for k, ref in reference.items():
            arr = self.model_state[k]
            state[k] = torch.from_numpy(np.ascontiguousarray(arr)).to(ref.dtype)
        net.load_state_dict(state)
        net.eval()
        return net

    def restore_optimizer(self, net: Network, optimizer) -> None:
        if self.optimizer_state is None:
            raise ValueError("checkpoint holds no optimizer state")
        _restore_optimizer(net, optimizer, self.optimizer_state)


def _capture_optimizer(net: Network, optimizer) -> dict:
    names = {id(p): n for n, p in net.named_parameters()}
    steps: dict[str, int] = {}
    arrays: dict[str, np.ndarray] = {}
    for p, st in optimizer.state.items():
        name = names.get(id(p))
        if name is None:
            continue
        steps[name] = int(st["step"])
        arrays[f"{name}.exp_avg"] = _tensor_to_np(st["exp_avg"])
        arrays[f"{name}.exp_avg_sq"] = _tensor_to_np(st["exp_avg_sq"])
    group = optimizer.param_groups[0]
    hyper = {"lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"]}
    return {"steps": steps, "arrays": arrays, "hyper": hyper}


def _restore_optimizer(net: Network, optimizer, opt_state: dict) -> None:
    params = dict(net.named_parameters())
    for name, step in opt_state["steps"].items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(
                np.ascontiguousarray(opt_state["arrays"][f"{name}.exp_avg"])
            ).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(
                np.ascontiguousarray(opt_state["arrays"][f"{name}.exp_avg_sq"])
            ).to(p.dtype),
        }
    hyper = opt_state["hyper"]
    for group in optimizer.param_groups:
        group["lr"] = hyper["lr"]
        group["betas"] = tuple(hyper["betas"])
        group["eps"] = hyper["eps"]


def save(path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for k in ckpt.model_state:
        arrays.append((f"model.{k}", np.ascontiguousarray(ckpt.model_state[k])))
    if ckpt.optimizer_state is not None:
        for k in sorted(ckpt.optimizer_state["arrays"]):
            arrays.append(
                (f"opt.{k}", np.ascontiguousarray(ckpt.optimizer_state["arrays"][k]))
            )
    if ckpt.torch_rng_state is not None:
        arrays.append(("rng.torch", np.ascontiguousarray(ckpt.torch_rng_state)))

    table = [
        {"key": k, "dtype": a.dtype.str, "shape": list(a.shape)} for k, a in arrays
    ]
    meta = {
        "spec": ckpt.spec.to_dict(),
        "iteration": ckpt.iteration,
        "optimizer": None
        if ckpt.optimizer_state is None
        else {
            "steps": ckpt.optimizer_state["steps"],
            "hyper": ckpt.optimizer_state["hyper"],
        },
        "numpy_rng_state": ckpt.numpy_rng_state,
        "extra": ckpt.extra,
        "arrays": table,
    }
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        f.write((json.dumps(meta, sort_keys=True) + "\n").encode("ascii"))
        for _, a in arrays:
            f.write(a.tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        meta = json.loads(f.readline().decode("ascii"))
        arrays: dict[str, np.ndarray] = {}
        for entry in meta["arrays"]:
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * dt.itemsize)
            arrays[entry["key"]] = np.frombuffer(buf, dtype=dt).reshape(
                entry["shape"]).copy()

    model_state = {
        k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")
    }
    opt_state = None
    if meta["optimizer"] is not None:
        opt_state = {
            "steps": meta["optimizer"]["steps"],
            "hyper": meta["optimizer"]["hyper"],
            "arrays": {
                k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")
            },
        }
    return Checkpoint(
        spec=nets.NetworkSpec.from_dict(meta["spec"]),
        model_state=model_state,
        iteration=meta["iteration"],
        optimizer_state=opt_state,
        numpy_rng_state=meta["numpy_rng_state"],
        torch_rng_state=arrays.get("rng.torch"),
        extra=meta.get("extra", {}),
    )
