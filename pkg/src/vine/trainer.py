"""Encoders, parameter registry, optimizer, and the episodic training loop.

Parameters live in one flat insertion-ordered dict from dotted path to
float64 array (the master copy); every training step mounts them as
leaves on a fresh tape, runs the pipeline, and updates the arrays in
place.  The same mounting code serves gradient checking and (tape-free)
evaluation, so paths cannot drift between uses.

Both encoders are small strided 3x3 conv stacks with different depths
and widths: the "sam" branch is deeper and wider (semantic stand-in),
the "res" branch shallower (structural stand-in).  Nothing is
pretrained; a freeze list in the config reproduces the frozen-backbone
regime when wanted.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import dfm as dfm_mod
from . import svga as svga_mod
from . import tensor as vt
from . import vrp as vrp_mod
from .config import Config, default_config, parse_config, render_config
from .episodes import Episode, miou, precision, sample_episode
from .gat import params_from_arrays
from .graphs import Graph, full_view_graph, knn_spatial_graph, star_view_graph
from .tensor import Tape, Tensor


class NanGradientError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, path: str):
        super().__init__(f"non-finite gradient at parameter path {path!r}")
        self.path = path


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(list(entropy))


def _xavier(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (c_in + c_out))
    return rng.uniform(-s, s, size=(c_out, c_in))


# ---------------------------------------------------------------------------
# encoders


@dataclass
class ConvLayer:
    weight: Tensor   # C_out x (C_in * 9)
    bias: Tensor
    stride: int


@dataclass
class EncoderParams:
    layers: list


def conv3x3(x: Tensor, layer: ConvLayer) -> Tensor:
    """Zero-padded 3x3 convolution via im2col."""
    c_out = layer.weight.shape[0]
    h_out = -(-x.shape[1] // layer.stride)
    w_out = -(-x.shape[2] // layer.stride)
    cols = vt.unfold3x3(x, layer.stride)
    out = vt.add_rowvec(vt.matmul(cols, vt.transpose(layer.weight)), layer.bias)
    return vt.reshape(vt.transpose(out), (c_out, h_out, w_out))


def encoder_forward(image: Tensor, p: EncoderParams) -> Tensor:
    """3xHxW image -> CxH/4xW/4 features (two stride-2 stages, relu)."""
    if image.shape[1] % 4 or image.shape[2] % 4:
        raise vt.ShapeError(f"image size {image.shape} not divisible by 4")
    x = image
    for layer in p.layers:
        x = vt.relu(conv3x3(x, layer))
    return x


def _encoder_spec(which: str, c: int) -> list[tuple[int, int, int]]:
    """(c_out, c_in, stride) per layer; the two branches differ on purpose."""
    if which == "res":
        return [(c // 2, 3, 2), (c, c // 2, 2)]
    if which == "sam":
        return [(c, 3, 2), (c, c, 1), (c, c, 2)]
    raise ValueError(f"unknown encoder {which!r}")


# ---------------------------------------------------------------------------
# parameter registry


def init_params(cfg: Config, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Flat path -> array map; insertion order is the canonical path order."""
    c = cfg["model.channels"]
    arrays: dict[str, np.ndarray] = {}

    for which in ("res", "sam"):
        for i, (c_out, c_in, _) in enumerate(_encoder_spec(which, c)):
            arrays[f"encoder_{which}.conv{i}.weight"] = _xavier(rng, c_out, c_in * 9)
            arrays[f"encoder_{which}.conv{i}.bias"] = np.zeros(c_out)

    svga_arrays = svga_mod.svga_init(c, cfg["svga.spatial_heads"],
                                     cfg["svga.view_heads"], rng)
    for gat_name, heads in svga_arrays.items():
        for i, head in enumerate(heads):
            for k, v in head.items():
                arrays[f"svga.{gat_name}.head{i}.{k}"] = v

    for proj, head in dfm_mod.dfm_init(c, rng).items():
        for k, v in head.items():
            arrays[f"dfm.{proj}.{k}"] = v

    for block, mats in vrp_mod.vrp_init(c, rng).items():
        for k, v in mats.items():
            arrays[f"vrp.{block}.{k}"] = v

    grid = cfg["episodes.image_size"] // 4
    dec = vrp_mod.decoder_init(cfg["model.tokens"], c, cfg["decoder.hidden"],
                               cfg["episodes.image_size"] // grid, rng)
    for k, v in dec.items():
        arrays[f"decoder.{k}"] = v

    for k, v in vrp_mod.prompt_init(cfg["model.tokens"], c, rng).items():
        arrays[f"prompt_tokens.{k}"] = v

    return arrays


@dataclass
class Model:
    encoder_res: EncoderParams
    encoder_sam: EncoderParams
    svga: svga_mod.SvgaParams
    dfm: dfm_mod.DfmParams
    vrp: vrp_mod.VrpParams
    decoder: vrp_mod.DecoderParams
    support_tokens: Tensor
    query_tokens: Tensor


def mount_leaves(arrays: dict[str, np.ndarray],
                 tape: Tape | None) -> dict[str, Tensor]:
    """Register every array as a tape leaf (or constant when tape is None)."""
    if tape is None:
        return {p: vt.tensor(a) for p, a in arrays.items()}
    return {p: tape.leaf(a) for p, a in arrays.items()}


def assemble_model(mounted: dict[str, Tensor], cfg: Config) -> Model:
    """Arrange mounted leaves into the typed structures the pipeline takes."""

    def enc(which: str) -> EncoderParams:
        layers = []
        for i, (_, _, stride) in enumerate(_encoder_spec(which, cfg["model.channels"])):
            layers.append(ConvLayer(mounted[f"encoder_{which}.conv{i}.weight"],
                                    mounted[f"encoder_{which}.conv{i}.bias"],
                                    stride))
        return EncoderParams(layers)

    def gat(name: str, heads: int):
        return params_from_arrays(
            [{k: mounted[f"svga.{name}.head{i}.{k}"]
              for k in ("weight", "attn_src", "attn_dst")}
             for i in range(heads)])

    def proj(name: str) -> dict[str, tuple[Tensor, Tensor]]:
        return {m: (mounted[f"dfm.{name}.{m}.weight"], mounted[f"dfm.{name}.{m}.bias"])
                for m in dfm_mod.MODALITIES}

    def attn(block: str) -> vrp_mod.AttnParams:
        return vrp_mod.AttnParams(*(mounted[f"vrp.{block}.{k}"]
                                    for k in ("wq", "wk", "wv", "wo")))

    return Model(
        encoder_res=enc("res"),
        encoder_sam=enc("sam"),
        svga=svga_mod.SvgaParams(
            gat_space=gat("gat_space", cfg["svga.spatial_heads"]),
            gat_view=gat("gat_view", cfg["svga.view_heads"])),
        dfm=dfm_mod.DfmParams(support_proj=proj("support_proj"),
                              query_proj=proj("query_proj")),
        vrp=vrp_mod.VrpParams(**{b: attn(b) for b in
                                 ("support_stage1", "support_stage2",
                                  "query_stage1", "query_stage2", "fuse")}),
        decoder=vrp_mod.DecoderParams(
            w1=mounted["decoder.w1"], b1=mounted["decoder.b1"],
            w2=mounted["decoder.w2"], b2=mounted["decoder.b2"],
            upsample=4),
        support_tokens=mounted["prompt_tokens.support_tokens"],
        query_tokens=mounted["prompt_tokens.query_tokens"],
    )


def mount_params(arrays: dict[str, np.ndarray], tape: Tape | None,
                 cfg: Config) -> Model:
    return assemble_model(mount_leaves(arrays, tape), cfg)


# ---------------------------------------------------------------------------
# forward pipeline


@dataclass
class EpisodeGraphs:
    spatial: Graph
    view_1shot: Graph
    view_support_kshot: Graph | None
    view_query_kshot: Graph | None


def build_graphs(cfg: Config) -> EpisodeGraphs:
    grid = cfg["episodes.image_size"] // 4
    r = cfg["svga.num_views"]
    k = cfg["episodes.k"]
    return EpisodeGraphs(
        spatial=knn_spatial_graph(grid, grid, cfg["svga.knn_k"]),
        view_1shot=star_view_graph(r + 1),
        view_support_kshot=full_view_graph(k) if k >= 2 else None,
        view_query_kshot=full_view_graph(r + 1) if k >= 2 else None,
    )


@dataclass
class PipelineResult:
    total: Tensor
    proto: Tensor
    pred: Tensor
    logits: Tensor
    disc_priors: dict


def _mean_tensors(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = vt.add(out, t)
    return vt.scale(out, 1.0 / len(ts))


def forward_pipeline(model: Model, ep: Episode, cfg: Config,
                     graphs: EpisodeGraphs,
                     view_rng: np.random.Generator) -> PipelineResult:
    """Full forward pass of one episode.

    Branch substitution: with one encoder disabled, its modality aliases
    the other branch's features so every downstream contract still holds
    (single-branch ablation rows run the identical prompt/decoder code).
    """
    use_res = cfg["encoder.use_res"]
    use_sam = cfg["encoder.use_sam"]
    k = len(ep.supports)
    grid = cfg["episodes.image_size"] // 4
    supports = [(vt.tensor(img), mask) for img, mask in ep.supports]
    query_img = vt.tensor(ep.query_image)

    def enc(which: str, img: Tensor) -> Tensor:
        return encoder_forward(img, getattr(model, f"encoder_{which}"))

    struct_which = "res" if use_res else "sam"

    # structural branch, refined by alignment when enabled
    proto_loss = None
    if cfg["svga.enabled"]:
        if k == 1:
            views = svga_mod.make_pseudo_views(
                supports[0][0], supports[0][1], cfg["svga.num_views"],
                cfg["svga.delta_max"], view_rng)
            s_feats = [enc(struct_which, img) for img, _ in views]
            q_feat = enc(struct_which, query_img)
            out = svga_mod.svga_forward(s_feats, q_feat, graphs.spatial,
                                        graphs.view_1shot, model.svga)
            s_struct = [out.support_refined]
            q_struct = out.query_refined
        else:
            s_feats = [enc(struct_which, img) for img, _ in supports]
            q_views = svga_mod.make_pseudo_views(
                query_img, np.zeros_like(ep.query_mask), cfg["svga.num_views"],
                cfg["svga.delta_max"], view_rng)
            q_feats = [enc(struct_which, img) for img, _ in q_views]
            out = svga_mod.svga_forward_kshot(
                s_feats, q_feats, graphs.spatial, graphs.view_support_kshot,
                graphs.view_query_kshot, model.svga)
            s_struct = out.support_refined
            q_struct = out.query_refined
        proto_loss = out.proto_loss
    else:
        s_struct = [enc(struct_which, img) for img, _ in supports]
        q_struct = enc(struct_which, query_img)
        proto_loss = vt.tensor(0.0)

    # semantic branch (never view-aligned)
    if use_sam and use_res:
        s_sem = [enc("sam", img) for img, _ in supports]
        q_sem = enc("sam", query_img)
    else:
        s_sem, q_sem = s_struct, q_struct

    feats = {"res": (s_struct, q_struct), "sam": (s_sem, q_sem)}
    masks_grid = [dfm_mod.downsample_mask_nearest(m, grid, grid)
                  for _, m in ep.supports]

    # foreground modulation per enabled modality
    disc_priors: dict = {}
    if cfg["dfm.enabled"]:
        enabled = [m for m, on in (("res", use_res), ("sam", use_sam)) if on]
        priors = {}
        for m in enabled:
            s_f, q_f = feats[m]
            protos = [dfm_mod.masked_prototypes(f, mg)
                      for f, mg in zip(s_f, masks_grid)]
            fg = _mean_tensors([p[0] for p in protos])
            bg = _mean_tensors([p[1] for p in protos])
            priors[m] = dfm_mod.discriminative_prior(q_f, fg, bg)
        if cfg["dfm.shared_prior"] and len(enabled) > 1:
            shared = _mean_tensors([priors[m].disc_prior for m in enabled])
            guides = {m: shared for m in enabled}
        else:
            guides = {m: priors[m].disc_prior for m in enabled}
        modded = {}
        for m in enabled:
            s_f, q_f = feats[m]
            s_mod = [dfm_mod.modulate_support(f, priors[m].fg_proto, mg,
                                              model.dfm, m)
                     for f, mg in zip(s_f, masks_grid)]
            q_mod = dfm_mod.modulate_query(q_f, priors[m].fg_proto, guides[m],
                                           model.dfm, m)
            modded[m] = (s_mod, q_mod)
            disc_priors[m] = priors[m].disc_prior
        for m in ("res", "sam"):
            feats[m] = modded.get(m) or modded[enabled[0]]

    s_res, q_res = feats["res"]
    s_sam, q_sam = feats["sam"]

    # reference prompts and decoding
    s_prompts = [vrp_mod.build_support_prompt(model.support_tokens, f_sam,
                                              f_res, mg, model.vrp)
                 for f_sam, f_res, mg in zip(s_sam, s_res, masks_grid)]
    p_support = _mean_tensors(s_prompts)
    p_query = vrp_mod.build_query_prompt(model.query_tokens, q_sam, q_res,
                                         model.vrp)
    fused = vrp_mod.fuse_vrp(p_support, p_query, model.vrp)
    logits = vrp_mod.decode_mask(fused, q_sam, model.decoder)

    pred_loss = vrp_mod.prediction_loss(logits, ep.query_mask)
    total = vrp_mod.total_loss(proto_loss, pred_loss,
                               cfg["loss.lambda_proto"],
                               cfg["loss.lambda_pred"])
    return PipelineResult(total=total, proto=proto_loss, pred=pred_loss,
                          logits=logits, disc_priors=disc_priors)


def predict_mask(logits: Tensor) -> np.ndarray:
    """Binarize at sigmoid > 0.5 (equivalently logits > 0)."""
    return (logits.data > 0.0).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={p: np.zeros_like(a) for p, a in arrays.items()},
                   v={p: np.zeros_like(a) for p, a in arrays.items()})


def adam_update(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8,
                frozen: tuple[str, ...] = ()) -> None:
    """In-place Adam step with bias correction; frozen prefixes skipped."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for path, arr in arrays.items():
        if any(path.startswith(pref) for pref in frozen):
            continue
        g = grads[path]
        if g.shape != arr.shape:
            raise vt.ShapeError(f"gradient shape {g.shape} vs parameter "
                                f"{arr.shape} at {path}")
        m = state.m[path]
        v = state.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Cosine annealing from lr_max at step 0 to lr_max/100 at the end."""
    lr_min = lr_max / 100.0
    if total_steps <= 1:
        return lr_max
    t = min(step, total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t))


def _frozen_prefixes(cfg: Config) -> tuple[str, ...]:
    return tuple(p.strip() for p in cfg["train.freeze"].split(",") if p.strip())


# ---------------------------------------------------------------------------
# training loop


def train_step(ep: Episode, arrays: dict[str, np.ndarray], state: AdamState,
               cfg: Config, graphs: EpisodeGraphs, lr: float,
               view_rng: np.random.Generator) -> dict:
    """One forward/backward/update; returns loss components and train mIoU."""
    tape = Tape()
    mounted = mount_leaves(arrays, tape)
    model = assemble_model(mounted, cfg)
    result = forward_pipeline(model, ep, cfg, graphs, view_rng)
    if not np.isfinite(float(result.total.data)):
        raise NanGradientError("loss")
    handle = tape.backward(result.total)
    grads = {path: handle.wrt(leaf) for path, leaf in mounted.items()}
    for path, g in grads.items():
        if not np.isfinite(g).all():
            raise NanGradientError(path)
    adam_update(arrays, grads, state, lr, frozen=_frozen_prefixes(cfg))
    return {
        "loss": float(result.total.data),
        "proto_loss": float(result.proto.data),
        "pred_loss": float(result.pred.data),
        "miou": miou(predict_mask(result.logits), ep.query_mask),
    }


def episode_seeds(cfg: Config, stream: int, count: int) -> np.ndarray:
    """Deterministic per-episode integer seeds for a named stream."""
    return _rng(cfg["seed"], stream).integers(0, 2 ** 62, size=count)


def _make_episode(cfg: Config, split: str, seed: int,
                  view_shift: float | None = None) -> Episode:
    shift = cfg["episodes.view_shift"] if view_shift is None else view_shift
    return sample_episode(
        split, cfg["episodes.k"], shift, np.random.default_rng(seed),
        size=cfg["episodes.image_size"], clutter_n=cfg["episodes.clutter"],
        occlusion=cfg["episodes.occlusion"])


class EpisodeQueue:
    """Bounded FIFO producer/consumer queue for episode prefetch.

    The producer thread renders episodes from a precomputed seed list in
    order, so consumption order (and therefore training) is independent
    of queue capacity and timing.
    """

    def __init__(self, cfg: Config, split: str, seeds: np.ndarray, maxsize: int):
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)
        self._thread = threading.Thread(
            target=self._produce, args=(cfg, split, seeds), daemon=True)
        self._thread.start()

    def _produce(self, cfg: Config, split: str, seeds: np.ndarray) -> None:
        for s in seeds:
            self._q.put(_make_episode(cfg, split, int(s)))

    def get(self) -> Episode:
        return self._q.get()


def train(cfg: Config, log_fh=None, progress=None) -> dict[str, np.ndarray]:
    """Run the full episodic loop; returns the trained parameter arrays.

    Writes one metrics line per step to ``log_fh``:
    "step loss proto_loss pred_loss miou lr".
    """
    arrays = init_params(cfg, _rng(cfg["seed"], 0))
    state = AdamState.for_params(arrays)
    graphs = build_graphs(cfg)
    n = cfg["train.episodes"]
    seeds = episode_seeds(cfg, 1, n)
    source = (EpisodeQueue(cfg, "base", seeds, cfg["train.prefetch"])
              if cfg["train.prefetch"] > 0 else None)
    for step in range(n):
        ep = source.get() if source else _make_episode(cfg, "base", int(seeds[step]))
        lr = cosine_lr(step, n, cfg["train.lr"])
        metrics = train_step(ep, arrays, state, cfg, graphs, lr,
                             _rng(cfg["seed"], 3, step))
        if log_fh is not None:
            log_fh.write(f"{step} {metrics['loss']:.10g} "
                         f"{metrics['proto_loss']:.10g} "
                         f"{metrics['pred_loss']:.10g} "
                         f"{metrics['miou']:.10g} {lr:.10g}\n")
        if progress is not None:
            progress(step, metrics)
    return arrays


def evaluate(arrays: dict[str, np.ndarray], cfg: Config, count: int | None = None,
             view_shift: float | None = None, collect=None) -> dict:
    """Mean mIoU/precision over held-out novel episodes (tape-free)."""
    model = mount_params(arrays, None, cfg)
    graphs = build_graphs(cfg)
    n = cfg["train.eval_episodes"] if count is None else count
    seeds = episode_seeds(cfg, 2, n)
    mious, precisions = [], []
    for i in range(n):
        ep = _make_episode(cfg, "novel", int(seeds[i]), view_shift=view_shift)
        result = forward_pipeline(model, ep, cfg, graphs, _rng(cfg["seed"], 4, i))
        pred = predict_mask(result.logits)
        mious.append(miou(pred, ep.query_mask))
        precisions.append(precision(pred, ep.query_mask))
        if collect is not None:
            collect(i, ep, pred, result)
    return {
        "miou": float(np.mean(mious)),
        "precision": float(np.mean(precisions)),
        "per_episode_miou": mious,
    }


# ---------------------------------------------------------------------------
# gradient checking


def tiny_config() -> Config:
    """Smallest config that still exercises every parameter path."""
    return default_config().with_values({
        "episodes.image_size": 32,
        "episodes.clutter": 1,
        "model.channels": 4,
        "model.tokens": 2,
        "decoder.hidden": 4,
        "svga.num_views": 1,
        "svga.spatial_heads": 2,
        "svga.view_heads": 1,
        "svga.knn_k": 3,
    })


def _gradcheck_arrays(cfg: Config) -> dict[str, np.ndarray]:
    """Initial parameters jittered off the zero-init point.

    At exact init the final decoder stage is zero, so the loss is flat
    in most of the network and a gradient check there compares 0 with 0.
    A fixed small perturbation makes every parameter path live.
    """
    arrays = init_params(cfg, _rng(cfg["seed"], 0))
    jitter = _rng(cfg["seed"], 5)
    for a in arrays.values():
        a += 0.05 * jitter.standard_normal(a.shape)
    return arrays


def gradcheck_all(cfg: Config | None = None, step: float = 1e-5,
                  progress=None) -> list[tuple[str, float]]:
    """Compare analytic gradients of the episode loss with central
    finite differences for every parameter coordinate.

    Returns (path, max relative error) per path; rel = |a - n| /
    max(|a|, |n|, 1e-6).  The pipeline is evaluated with a fixed episode
    and a re-seeded pseudo-view RNG, so the loss is a deterministic
    function of the parameters.
    """
    cfg = tiny_config() if cfg is None else cfg
    arrays = _gradcheck_arrays(cfg)
    graphs = build_graphs(cfg)
    ep = _make_episode(cfg, "base", 12345)

    def loss_value() -> float:
        model = mount_params(arrays, None, cfg)
        out = forward_pipeline(model, ep, cfg, graphs, _rng(7))
        return float(out.total.data)

    tape = Tape()
    mounted = mount_leaves(arrays, tape)
    model = assemble_model(mounted, cfg)
    out = forward_pipeline(model, ep, cfg, graphs, _rng(7))
    handle = tape.backward(out.total)
    analytic = {path: handle.wrt(leaf) for path, leaf in mounted.items()}

    report = []
    for path, arr in arrays.items():
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            a = float(analytic[path].reshape(-1)[i])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, rel)
        report.append((path, worst))
        if progress is not None:
            progress(path, worst)
    return report


# ---------------------------------------------------------------------------
# ablation suite


ABLATION_ROWS = (
    ("(a)", "structural encoder only",
     {"encoder.use_res": True, "encoder.use_sam": False,
      "svga.enabled": False, "dfm.enabled": False}),
    ("(b)", "semantic encoder only",
     {"encoder.use_res": False, "encoder.use_sam": True,
      "svga.enabled": False, "dfm.enabled": False}),
    ("(c)", "dual encoders",
     {"encoder.use_res": True, "encoder.use_sam": True,
      "svga.enabled": False, "dfm.enabled": False}),
    ("(d)", "dual encoders + foreground modulation",
     {"encoder.use_res": True, "encoder.use_sam": True,
      "svga.enabled": False, "dfm.enabled": True}),
    ("(e)", "dual encoders + view alignment",
     {"encoder.use_res": True, "encoder.use_sam": True,
      "svga.enabled": True, "dfm.enabled": False}),
    ("(f)", "full model",
     {"encoder.use_res": True, "encoder.use_sam": True,
      "svga.enabled": True, "dfm.enabled": True}),
)


def run_ablation_suite(cfg: Config, seeds: tuple[int, ...] = (0,),
                       progress=None) -> list[dict]:
    """Train all six variants per seed on identical episode streams and
    evaluate on the shared held-out set; returns one row dict per variant."""
    rows = []
    for row_id, label, flags in ABLATION_ROWS:
        per_seed = []
        for seed in seeds:
            variant = cfg.with_values(dict(flags, **{"seed": seed}))
            arrays = train(variant)
            score = evaluate(arrays, variant)
            per_seed.append(score["miou"])
            if progress is not None:
                progress(row_id, seed, score["miou"])
        rows.append({"row": row_id, "label": label, "flags": flags,
                     "per_seed": per_seed,
                     "mean_miou": float(np.mean(per_seed))})
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    out = ["row\tmIoU\tvariant"]
    for r in rows:
        out.append(f"{r['row']}\t{r['mean_miou']:.4f}\t{r['label']}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, arrays: dict[str, np.ndarray],
                    cfg: Config) -> None:
    """(path-length u32, path bytes, tensor dump)* then a zero-length
    sentinel and the config text."""
    with open(path, "wb") as fh:
        for p, arr in arrays.items():
            pb = p.encode("utf-8")
            fh.write(struct.pack("<I", len(pb)))
            fh.write(pb)
            vt.dump_tensor(vt.tensor(arr), fh)
        fh.write(struct.pack("<I", 0))
        fh.write(render_config(cfg).encode("utf-8"))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], Config]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            raw = fh.read(4)
            if len(raw) != 4:
                raise ValueError(f"{path}: truncated checkpoint")
            (n,) = struct.unpack("<I", raw)
            if n == 0:
                break
            p = fh.read(n).decode("utf-8")
            arrays[p] = vt.load_tensor(fh).data
        cfg = parse_config(fh.read().decode("utf-8"))
    return arrays, cfg
