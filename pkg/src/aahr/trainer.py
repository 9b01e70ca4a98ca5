"""Training orchestration: the combined objective, optimizer loop with
warmup, checkpointing to the portable tensor format, and inference-time
embedding dumps."""

import json
import math
import os
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import metrics, tensorio
from .encoder import PairEncoder
from .errors import ConfigError, DatasetError, TrainingError
from .momentum import MemoryBank, MomentumEncoder, mcl_total
from .neighborhood import NeighborhoodNet, nsi_loss, triplet_loss
from .prototype import PrototypeBank, assign_batch, pga_loss

PROFILES: Dict[str, dict] = {
    # desk-scale profile; committed defaults for the synthetic regression run
    "synthetic": dict(
        d=64, m_codes=8, batch_size=16, learning_rate=5e-4, weight_decay=1e-4,
        epochs=30, tau=0.1, gamma=0.2, alpha=1.5, epsilon_kernel=1.0,
        m_tilde=0.99, bank_size=64, num_prototypes=16,
        sinkhorn_iters=3, sinkhorn_eps=0.05, dropout_gcn=0.1, dropout_gat=0.1,
        warmup_frac=0.05, seed=42,
    ),
    "flickr": dict(
        d=1024, m_codes=8, batch_size=128, learning_rate=5e-4, weight_decay=1e-4,
        epochs=30, tau=0.1, gamma=0.2, alpha=1.5, epsilon_kernel=1.0,
        m_tilde=0.999, bank_size=2048, num_prototypes=384,
        sinkhorn_iters=3, sinkhorn_eps=0.05, dropout_gcn=0.6, dropout_gat=0.1,
        warmup_frac=0.05, seed=42,
    ),
    "coco": dict(
        d=1024, m_codes=8, batch_size=256, learning_rate=5e-4, weight_decay=1e-4,
        epochs=30, tau=0.1, gamma=0.2, alpha=1.5, epsilon_kernel=1.0,
        m_tilde=0.999, bank_size=4096, num_prototypes=768,
        sinkhorn_iters=3, sinkhorn_eps=0.05, dropout_gcn=0.6, dropout_gat=0.1,
        warmup_frac=0.05, seed=42,
    ),
}


@dataclass
class TrainConfig:
    profile: str = "synthetic"
    d: int = 64
    m_codes: int = 8
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    tau: float = 0.1
    gamma: float = 0.2
    alpha: float = 1.5
    epsilon_kernel: float = 1.0
    m_tilde: float = 0.99
    bank_size: int = 64
    num_prototypes: int = 16
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05
    dropout_gcn: float = 0.1
    dropout_gat: float = 0.1
    warmup_frac: float = 0.05
    seed: int = 42
    loss_mode: str = "full"  # or "triplet_only"

    def validate(self) -> "TrainConfig":
        positive = dict(
            d=self.d, m_codes=self.m_codes, batch_size=self.batch_size,
            learning_rate=self.learning_rate, tau=self.tau,
            bank_size=self.bank_size, num_prototypes=self.num_prototypes,
            sinkhorn_iters=self.sinkhorn_iters, sinkhorn_eps=self.sinkhorn_eps,
            epsilon_kernel=self.epsilon_kernel,
        )
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name, value in dict(
            epochs=self.epochs, weight_decay=self.weight_decay, gamma=self.gamma,
            alpha=self.alpha, warmup_frac=self.warmup_frac, seed=self.seed,
        ).items():
            if value < 0:
                raise ConfigError(f"{name} must be nonnegative, got {value}")
        if not 0.0 <= self.m_tilde <= 1.0:
            raise ConfigError("m_tilde must lie in [0, 1]")
        for name, value in dict(dropout_gcn=self.dropout_gcn, dropout_gat=self.dropout_gat).items():
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if self.loss_mode not in ("full", "triplet_only"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        return self


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a config from a profile name plus explicit overrides.

    The env var AAHR_SEED, when set, overrides the seed.
    """
    doc = dict(doc)
    profile = doc.pop("profile", "synthetic")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = dict(PROFILES[profile])
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged.update(doc)
    merged["profile"] = profile
    env_seed = os.environ.get("AAHR_SEED")
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"AAHR_SEED must be an integer, got {env_seed!r}") from exc
    try:
        return TrainConfig(**merged).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path) -> TrainConfig:
    """Load a TOML or JSON config file."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml_parser
        except ImportError:
            import tomli as toml_parser

        try:
            doc = toml_parser.loads(path.read_text(encoding="utf-8"))
        except toml_parser.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a table/object")
    return config_from_dict(doc)


class AahrModel(nn.Module):
    """Live parameters: pair encoder, prototype bank, graph interaction nets."""

    def __init__(self, config: TrainConfig, dims: dict):
        super().__init__()
        self.encoder = PairEncoder(
            dims["d_v"], dims["d_w"], dims["d_g"], config.d, config.m_codes
        )
        self.prototypes = PrototypeBank(config.num_prototypes, config.d, config.tau)
        self.graph = NeighborhoodNet(config.d, config.dropout_gcn, config.dropout_gat)


@dataclass
class TrainState:
    config: TrainConfig
    dims: dict
    model: AahrModel
    momentum: MomentumEncoder
    bank_v: MemoryBank
    bank_t: MemoryBank
    optimizer: torch.optim.AdamW
    epoch: int = 0
    global_step: int = 0
    total_steps: Optional[int] = None


def init_state(config: TrainConfig, dims: dict) -> TrainState:
    config.validate()
    for key in ("d_v", "d_w", "d_g"):
        if key not in dims:
            raise ConfigError(f"manifest dims must declare {key}")
    torch.manual_seed(config.seed)
    model = AahrModel(config, dims)
    momentum = MomentumEncoder(model.encoder, config.m_tilde)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    return TrainState(
        config=config,
        dims={k: dims[k] for k in ("d_v", "d_w", "d_g")},
        model=model,
        momentum=momentum,
        bank_v=MemoryBank(config.bank_size, config.d),
        bank_t=MemoryBank(config.bank_size, config.d),
        optimizer=optimizer,
    )


def encode_batch(encoder: PairEncoder, bundles: Sequence[tensorio.FeatureBundle]):
    """Encode bundles one at a time (batch composition never leaks in)."""
    pairs = [encoder.encode_bundle(b) for b in bundles]
    v = torch.stack([p.v for p in pairs])
    t = torch.stack([p.t for p in pairs])
    return v, t, [p.locals_img for p in pairs], [p.locals_txt for p in pairs]


def _step_generator(config: TrainConfig, step: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed((config.seed * 1_000_003 + step * 7_919 + 17) % (2**63 - 1))
    return gen


def _apply_warmup(state: TrainState) -> float:
    lr = state.config.learning_rate
    if state.total_steps:
        warmup = max(1, math.ceil(state.config.warmup_frac * state.total_steps))
        lr = lr * min(1.0, (state.global_step + 1) / warmup)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    return lr


def train_step(state: TrainState, bundles: Sequence[tensorio.FeatureBundle]) -> Dict[str, float]:
    """One optimization step; returns the component losses.

    Order: forward, loss, backprop, optimizer step, prototype renorm,
    momentum update, bank push (the bank receives features produced by the
    momentum state used for this batch's positives).
    """
    cfg = state.config
    if len(bundles) < 2:
        raise TrainingError("a training batch needs at least 2 pairs")
    model = state.model
    model.train()
    gen = _step_generator(cfg, state.global_step)
    v, t, locals_img, locals_txt = encode_batch(model.encoder, bundles)

    components: Dict[str, torch.Tensor] = {}
    mom_v = mom_t = None
    if cfg.loss_mode == "triplet_only":
        components["triplet"] = triplet_loss(v @ t.t(), cfg.gamma)
    else:
        assign = assign_batch(v, t, model.prototypes, cfg.sinkhorn_iters, cfg.sinkhorn_eps)
        components["pga"] = pga_loss(assign.u_v, assign.u_t, assign.d_v, assign.d_t, cfg.tau)
        with torch.no_grad():
            mom_v, mom_t, _, _ = encode_batch(state.momentum.module, bundles)
        components["mcl"] = mcl_total(v, t, mom_v, mom_t, state.bank_v, state.bank_t, cfg.tau)
        v_hat, t_hat = model.graph(
            v, t, locals_img, locals_txt, cfg.epsilon_kernel, cfg.alpha, generator=gen
        )
        components["nsi"] = nsi_loss(
            (v, t), (v_hat, t_hat), model.prototypes, cfg.gamma,
            cfg.sinkhorn_iters, cfg.sinkhorn_eps,
        )

    total = sum(components.values())
    if not torch.isfinite(total):
        breakdown = {k: float(c.detach()) for k, c in components.items()}
        raise TrainingError(f"non-finite loss at step {state.global_step}: {breakdown}")

    state.optimizer.zero_grad()
    total.backward()
    lr = _apply_warmup(state)
    state.optimizer.step()
    model.prototypes.renormalize()
    if cfg.loss_mode != "triplet_only":
        state.momentum.update(model.encoder)
        state.bank_v.push(mom_v)
        state.bank_t.push(mom_t)
    state.global_step += 1

    out = {k: float(c.detach()) for k, c in components.items()}
    out["total"] = float(total.detach())
    out["lr"] = lr
    return out


def _epoch_batches(n_pairs: int, cfg: TrainConfig, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_pairs)
    batches = [order[i : i + cfg.batch_size] for i in range(0, n_pairs, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def steps_per_epoch(n_pairs: int, cfg: TrainConfig) -> int:
    return len(_epoch_batches(n_pairs, cfg, 0))


def train(
    config: TrainConfig,
    manifest: tensorio.DatasetManifest,
    out_dir,
    log_stream=None,
) -> Path:
    """Run the full loop over the manifest; returns the checkpoint directory.

    Checkpoints land at epoch boundaries (banks start empty each epoch, so a
    resumed run replays the remaining epochs bitwise).  One JSON line per
    step goes to ``<out>/train_log.jsonl`` and to ``log_stream`` if given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundles = [tensorio.read_bundle(manifest, p.pair_id) for p in manifest.pairs]
    if not bundles:
        raise DatasetError(f"manifest {manifest.name!r} has no pairs")
    state = init_state(config, manifest.dims)
    state.total_steps = config.epochs * steps_per_epoch(len(bundles), config)
    ckpt_dir = out_dir / "checkpoint"

    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            state.bank_v.clear()
            state.bank_t.clear()
            for batch_ids in _epoch_batches(len(bundles), config, epoch):
                losses = train_step(state, [bundles[i] for i in batch_ids])
                record = {"epoch": epoch, "step": state.global_step, **losses}
                line = json.dumps(record, sort_keys=True)
                log.write(line + "\n")
                if log_stream is not None:
                    print(line, file=log_stream)
            state.epoch = epoch + 1
            save_checkpoint(state, ckpt_dir)
    if config.epochs == 0:
        save_checkpoint(state, ckpt_dir)
    return ckpt_dir


def resume_train(
    state: TrainState,
    manifest: tensorio.DatasetManifest,
    epochs: int,
    out_dir=None,
) -> TrainState:
    """Continue a loaded state for ``epochs`` further epochs (same schedule)."""
    bundles = [tensorio.read_bundle(manifest, p.pair_id) for p in manifest.pairs]
    if state.total_steps is None:
        state.total_steps = (state.epoch + epochs) * steps_per_epoch(len(bundles), state.config)
    for epoch in range(state.epoch, state.epoch + epochs):
        state.bank_v.clear()
        state.bank_t.clear()
        for batch_ids in _epoch_batches(len(bundles), state.config, epoch):
            train_step(state, [bundles[i] for i in batch_ids])
        state.epoch = epoch + 1
        if out_dir is not None:
            save_checkpoint(state, Path(out_dir) / "checkpoint")
    return state


# --- checkpoint serialization (portable tensor files + JSON metadata) ---


def _save_tensors(tensors: Dict[str, torch.Tensor], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in tensors.items():
        tensorio.write_tensor(
            tensor.detach().cpu().numpy(), directory / f"{name}{tensorio.TENSOR_SUFFIX}"
        )


def _load_tensors(directory: Path, names) -> Dict[str, torch.Tensor]:
    out = {}
    for name in names:
        arr = tensorio.read_tensor(directory / f"{name}{tensorio.TENSOR_SUFFIX}")
        out[name] = torch.from_numpy(arr)
    return out


def save_checkpoint(state: TrainState, ckpt_dir) -> Path:
    ckpt_dir = Path(ckpt_dir)
    model_sd = {k: v for k, v in state.model.state_dict().items()}
    momentum_sd = {k: v for k, v in state.momentum.module.state_dict().items()}
    _save_tensors(model_sd, ckpt_dir / "params")
    _save_tensors(momentum_sd, ckpt_dir / "momentum")

    optim_steps: Dict[str, float] = {}
    optim_tensors: Dict[str, torch.Tensor] = {}
    for name, param in state.model.named_parameters():
        st = state.optimizer.state.get(param)
        if not st:
            continue
        optim_steps[name] = float(st["step"])
        optim_tensors[f"{name}.exp_avg"] = st["exp_avg"]
        optim_tensors[f"{name}.exp_avg_sq"] = st["exp_avg_sq"]
    _save_tensors(optim_tensors, ckpt_dir / "optim")

    meta = {
        "format": 1,
        "config": asdict(state.config),
        "dims": state.dims,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "total_steps": state.total_steps,
        "model_params": sorted(model_sd),
        "momentum_params": sorted(momentum_sd),
        "optim_steps": optim_steps,
    }
    (ckpt_dir / "meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8"
    )
    return ckpt_dir


def load_checkpoint(ckpt_dir) -> TrainState:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = TrainConfig(**meta["config"]).validate()
    state = init_state(config, meta["dims"])
    state.model.load_state_dict(_load_tensors(ckpt_dir / "params", meta["model_params"]))
    state.momentum.module.load_state_dict(
        _load_tensors(ckpt_dir / "momentum", meta["momentum_params"])
    )
    optim_tensors = _load_tensors(
        ckpt_dir / "optim",
        [f"{n}.{kind}" for n in meta["optim_steps"] for kind in ("exp_avg", "exp_avg_sq")],
    )
    params = dict(state.model.named_parameters())
    for name, step in meta["optim_steps"].items():
        state.optimizer.state[params[name]] = {
            "step": torch.tensor(float(step)),
            "exp_avg": optim_tensors[f"{name}.exp_avg"],
            "exp_avg_sq": optim_tensors[f"{name}.exp_avg_sq"],
        }
    state.epoch = meta["epoch"]
    state.global_step = meta["global_step"]
    state.total_steps = meta["total_steps"]
    return state


# --- inference ---


@torch.no_grad()
def embed(state: TrainState, manifest: tensorio.DatasetManifest, out_dir) -> Path:
    """Write base (dual-stream) embeddings for every pair as tensor files.

    Pairs are encoded independently, so results never depend on how the
    manifest groups or orders them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state.model.eval()
    index = {"pairs": [], "d": state.config.d}
    for rec in manifest.pairs:
        bundle = tensorio.read_bundle(manifest, rec.pair_id)
        enc = state.model.encoder.encode_bundle(bundle)
        v_rel = f"{rec.pair_id}.v{tensorio.TENSOR_SUFFIX}"
        t_rel = f"{rec.pair_id}.t{tensorio.TENSOR_SUFFIX}"
        tensorio.write_tensor(enc.v.numpy(), out_dir / v_rel)
        tensorio.write_tensor(enc.t.numpy(), out_dir / t_rel)
        index["pairs"].append(
            {
                "pair_id": rec.pair_id,
                "image_id": rec.image_id,
                "caption_id": rec.caption_id,
                "v": v_rel,
                "t": t_rel,
            }
        )
    (out_dir / "embeddings.json").write_text(
        json.dumps(index, indent=1, sort_keys=True), encoding="utf-8"
    )
    return out_dir / "embeddings.json"


def load_embeddings(emb_dir) -> Tuple[np.ndarray, np.ndarray, List[str], List[str]]:
    """Load an embed() dump, deduplicating images and captions by id."""
    emb_dir = Path(emb_dir)
    index_path = emb_dir / "embeddings.json"
    if not index_path.exists():
        raise DatasetError(f"no embeddings index at {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    image_ids: List[str] = []
    caption_ids: List[str] = []
    image_rows: List[np.ndarray] = []
    caption_rows: List[np.ndarray] = []
    seen_img, seen_cap = set(), set()
    for rec in index["pairs"]:
        if rec["image_id"] not in seen_img:
            seen_img.add(rec["image_id"])
            image_ids.append(rec["image_id"])
            image_rows.append(tensorio.read_tensor(emb_dir / rec["v"]))
        if rec["caption_id"] not in seen_cap:
            seen_cap.add(rec["caption_id"])
            caption_ids.append(rec["caption_id"])
            caption_rows.append(tensorio.read_tensor(emb_dir / rec["t"]))
    if not image_rows or not caption_rows:
        raise DatasetError(f"embeddings index {index_path} is empty")
    return np.stack(image_rows), np.stack(caption_rows), image_ids, caption_ids


@torch.no_grad()
def encode_manifest(state: TrainState, manifest: tensorio.DatasetManifest):
    """In-memory variant of embed(): unique image/caption embeddings plus ids."""
    state.model.eval()
    image_ids: List[str] = []
    caption_ids: List[str] = []
    image_rows: List[np.ndarray] = []
    caption_rows: List[np.ndarray] = []
    seen_img, seen_cap = set(), set()
    for rec in manifest.pairs:
        bundle = tensorio.read_bundle(manifest, rec.pair_id)
        enc = state.model.encoder.encode_bundle(bundle)
        if rec.image_id not in seen_img:
            seen_img.add(rec.image_id)
            image_ids.append(rec.image_id)
            image_rows.append(enc.v.numpy())
        if rec.caption_id not in seen_cap:
            seen_cap.add(rec.caption_id)
            caption_ids.append(rec.caption_id)
            caption_rows.append(enc.t.numpy())
    return np.stack(image_rows), np.stack(caption_rows), image_ids, caption_ids


def evaluate_state(state: TrainState, manifest: tensorio.DatasetManifest) -> metrics.EvalResult:
    img, txt, image_ids, caption_ids = encode_manifest(state, manifest)
    return metrics.evaluate(img, txt, image_ids, caption_ids, manifest.image_to_captions)
