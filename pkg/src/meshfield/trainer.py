"""Training orchestration for the three optimization stages.

Stage 1 fits the continuous model with per-sample shading; stage 2
co-trains the continuous and binarized models on supersampled pixels
with feature averaging; the fine-tune pass then adapts only the feature
and shader networks to the hard surface. The acceleration grid trains
alongside under its own objective, cleanly separated by stop-gradients.

Every step is a pure function of (seed, dataset, config): batches come
from a counter-seeded generator and gradient accumulation order is
fixed, so reruns are bit-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import accel
from . import autodiff as ad
from . import lattice as lat
from . import model
from . import sampling
from .config import RunConfig, config_from_dict
from .dataset import Camera, Dataset, camera_rays

CHECKPOINT_VERSION = 1

STAGE1, STAGE2, FINETUNE = "stage1", "stage2", "finetune"


@dataclass
class TrainState:
    run: RunConfig
    lattice_cfg: lat.LatticeConfig
    topo: lat.QuadTopology
    offsets: ad.Tensor
    grid: accel.AccelGrid
    params: model.FieldParams
    stage: str = "init"
    step: int = 0

    def main_parameters(self):
        return [self.offsets] + self.params.parameters()

    def world_vertices(self) -> np.ndarray:
        return lat.vertex_positions_np(self.lattice_cfg, self.topo, self.offsets.values)

    def final_schedule(self) -> sampling.Schedule:
        return sampling.schedule_limits(1.0, self.run.resolution)


def new_state(run: RunConfig) -> TrainState:
    cfg = run.lattice_config()
    topo = lat.build_topology(cfg)
    offsets = ad.Tensor(np.zeros((cfg.n_voxels, 3)), name="offsets")
    grid = accel.AccelGrid(run.resolution, run.accel_threshold)
    params = model.make_params(run.model_width, run.encoding_degree, run.seed)
    return TrainState(run, cfg, topo, offsets, grid, params)


# -- forward pass --------------------------------------------------------------


def _mse(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    d = ad.sub(pred, ad.Tensor(target))
    return ad.mul(ad.tensor_sum(ad.mul(d, d)), 1.0 / len(target))


def _mean_dirs(dirs: np.ndarray, n_pixels: int, s2: int) -> np.ndarray:
    m = dirs.reshape(n_pixels, s2, 3).mean(axis=1)
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(n > 0, n, 1.0)


def stage_forward(
    state: TrainState,
    quad: sampling.SampleBatch,
    dirs: np.ndarray,
    gt: np.ndarray,
    stage: str,
    limit: int,
    supersample: int,
    include_grid: bool = True,
):
    """Build the loss graph for one batch from frozen sample geometry.

    Returns (total loss, terms dict). ``quad`` stays constant here, so
    finite-difference checks can re-run this function under perturbed
    parameters with identical quadrature. The grid objective sees only
    stop-gradiented compositing weights; finite-difference oracles must
    therefore drop it (``include_grid=False``) when perturbing model
    parameters, matching the stop-gradient contract.
    """
    run = state.run
    n_rays = quad.n_rays
    k = limit
    s2 = supersample * supersample
    n_pixels = n_rays // s2

    world = lat.vertex_positions_tensor(state.lattice_cfg, state.topo, state.offsets)
    corners = state.topo.tris[quad.tri_id]  # (S, 3) vertex ids
    p = None
    for c in range(3):
        vc = ad.gather_rows(world, corners[:, c])
        term = ad.mul(vc, quad.bary[:, c : c + 1])
        p = term if p is None else ad.add(p, term)

    alpha_s, feat_s = model.field_eval(state.params, p)
    row = quad.ray_index * k + quad.rank
    alpha = ad.reshape(ad.index_add(n_rays * k, row, alpha_s), (n_rays, k))
    weights, _ = model.composite_weights(alpha)
    w_flat = ad.reshape(weights, (n_rays * k, 1))
    w_s = ad.gather_rows(w_flat, row)

    terms = {}
    if stage == STAGE1:
        rgb_s = model.shade(state.params, feat_s, ad.Tensor(dirs[quad.ray_index]))
        color = ad.index_add(n_rays, quad.ray_index, ad.mul(w_s, rgb_s))
        loss_color = _mse(color, gt)
        terms["color"] = float(loss_color.values)
        photometric = loss_color
    else:
        feat_ray = ad.index_add(n_rays, quad.ray_index, ad.mul(w_s, feat_s))
        alpha_hat = model.binarize(alpha)
        weights_hat, _ = model.composite_weights(alpha_hat)
        wh_s = ad.gather_rows(ad.reshape(weights_hat, (n_rays * k, 1)), row)
        feat_ray_hat = ad.index_add(n_rays, quad.ray_index, ad.mul(wh_s, feat_s))

        mean_d = ad.Tensor(_mean_dirs(dirs, n_pixels, s2))
        scale = 1.0 / s2
        feat_px = ad.mul(ad.tensor_sum(ad.reshape(feat_ray, (n_pixels, s2, 8)), axis=1), scale)
        feat_px_hat = ad.mul(
            ad.tensor_sum(ad.reshape(feat_ray_hat, (n_pixels, s2, 8)), axis=1), scale
        )
        rgb_bin = model.shade(state.params, feat_px_hat, mean_d)
        loss_bin = _mse(rgb_bin, gt)
        terms["binary"] = float(loss_bin.values)
        if stage == FINETUNE:
            photometric = loss_bin
        else:
            rgb_cont = model.shade(state.params, feat_px, mean_d)
            loss_cont = _mse(rgb_cont, gt)
            terms["color"] = float(loss_cont.values)
            photometric = ad.add(ad.mul(loss_bin, 0.5), ad.mul(loss_cont, 0.5))

    total = photometric
    if stage != FINETUNE:
        if run.distortion_weight > 0.0 and len(quad):
            sdense = _normalized_depths(quad, n_rays, k)
            cw = ad.cumsum(weights, axis=1, exclusive=True)
            cws = ad.cumsum(ad.mul(weights, ad.Tensor(sdense)), axis=1, exclusive=True)
            per = ad.mul(weights, ad.sub(ad.mul(ad.Tensor(sdense), cw), cws))
            loss_dist = ad.mul(ad.tensor_sum(per), 2.0 / n_rays)
            terms["dist"] = float(loss_dist.values)
            total = ad.add(total, ad.mul(loss_dist, run.distortion_weight))

        loss_v = lat.vertex_regularizer(state.offsets)
        terms["vertex"] = float(loss_v.values)
        total = ad.add(total, loss_v)

        if include_grid:
            lattice_hits = quad.voxel_id >= 0
            bound, sparse, smooth = accel.grid_losses(
                state.grid, quad.voxel_id[lattice_hits], w_s.values[lattice_hits]
            )
            terms["grid_bound"] = float(bound.values)
            terms["grid_sparse"] = float(sparse.values)
            terms["grid_smooth"] = float(smooth.values)
            grid_total = ad.add(
                bound,
                ad.add(
                    ad.mul(sparse, accel.SPARSITY_WEIGHT),
                    ad.mul(smooth, accel.SMOOTHNESS_WEIGHT),
                ),
            )
            total = ad.add(total, grid_total)

    terms["total"] = float(total.values)
    return total, terms


def _normalized_depths(quad: sampling.SampleBatch, n_rays: int, k: int) -> np.ndarray:
    t_near = np.full(n_rays, np.inf)
    t_far = np.zeros(n_rays)
    np.minimum.at(t_near, quad.ray_index, quad.t)
    np.maximum.at(t_far, quad.ray_index, quad.t)
    span = np.where(np.isfinite(t_near), t_far - t_near, 1.0) + 1e-12
    s = (quad.t - np.where(np.isfinite(t_near), t_near, 0.0)[quad.ray_index]) / span[quad.ray_index]
    dense = np.zeros(n_rays * k)
    dense[quad.ray_index * k + quad.rank] = s
    return dense.reshape(n_rays, k)


# -- training loop --------------------------------------------------------------


def _precompute_rays(cams: list[Camera], supersample: int):
    o = np.stack([camera_rays(c, supersample)[0] for c in cams])
    d = np.stack([camera_rays(c, supersample)[1] for c in cams])
    return o, d


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    idx = {STAGE1: 1, STAGE2: 2, FINETUNE: 3}[stage]
    return np.random.default_rng(np.random.SeedSequence([seed, idx]))


def train_stage(
    state: TrainState,
    dataset: Dataset,
    stage: str,
    log_path: str | None = None,
) -> TrainState:
    """Run one optimization stage to its configured step budget."""
    run = state.run
    stage_cfg = {STAGE1: run.stage1, STAGE2: run.stage2, FINETUNE: run.finetune}[stage]
    supersample = 1 if stage == STAGE1 else run.supersample
    s2 = supersample * supersample
    rng = _stage_rng(run.seed, stage)

    if stage == FINETUNE:
        params = state.params.feature_parameters() + state.params.shader_parameters()
    else:
        params = state.main_parameters()
    adam = ad.AdamState(lr=stage_cfg.lr_start)
    adam_grid = ad.AdamState(lr=stage_cfg.grid_lr)

    rays_o, rays_d = _precompute_rays(dataset.cameras, supersample)
    n_views = len(dataset.cameras)
    h, w = dataset.images.shape[1:3]
    gt_flat = dataset.images.reshape(n_views * h * w, 3)

    writer = None
    if log_path:
        writer = open(log_path, "a", newline="")
        log = csv.writer(writer)
        if writer.tell() == 0:
            log.writerow(
                "stage step total color binary dist vertex grid_bound grid_sparse grid_smooth psnr limit batch_rays samples lr".split()
            )

    steps = stage_cfg.steps
    for step in range(steps):
        progress = step / steps if stage == STAGE1 else 1.0
        sched = sampling.schedule_limits(progress, run.resolution)
        n_px = stage_cfg.batch_pixels * sched.batch_multiplier
        pix = rng.integers(0, n_views * h * w, size=n_px)
        view = pix // (h * w)
        within = pix % (h * w)
        sub = (within[:, None] * s2 + np.arange(s2)[None, :]).reshape(-1)
        view_rep = np.repeat(view, s2)
        origins = rays_o[view_rep, sub]
        dirs = rays_d[view_rep, sub]
        gt = gt_flat[pix]

        quad = sampling.sample_rays(
            origins,
            dirs,
            state.lattice_cfg,
            state.topo,
            state.world_vertices(),
            sched.limit,
            grid=state.grid,
            use_pruning=sched.use_pruning,
        )

        frac = step / max(steps - 1, 1)
        lr = stage_cfg.lr_start * (stage_cfg.lr_end / stage_cfg.lr_start) ** frac

        ad.zero_grads(params + [state.grid.values])
        with ad.Tape() as tape:
            total, terms = stage_forward(state, quad, dirs, gt, stage, sched.limit, supersample)
        if not np.isfinite(total.values):
            if run.out_dir:
                save_checkpoint(os.path.join(run.out_dir, "diverged.npz"), state)
            raise ad.TrainingError(f"non-finite loss at {stage} step {step}")
        ad.backward(tape, total)
        ad.adam_step(params, adam, lr=lr)
        if stage != FINETUNE:
            ad.adam_step([state.grid.values], adam_grid)
            state.grid.project_nonnegative()

        if writer:
            # batch PSNR from the photometric term (per-channel MSE = L/3)
            photo = terms.get("binary", terms.get("color", 0.0))
            psnr = 10.0 * np.log10(3.0 / photo) if photo > 0 else float("inf")
            log.writerow(
                [stage, step]
                + [
                    f"{terms.get(k, 0.0):.6g}"
                    for k in "total color binary dist vertex grid_bound grid_sparse grid_smooth".split()
                ]
                + [f"{psnr:.4g}", sched.limit, len(origins), len(quad), f"{lr:.6g}"]
            )
    if writer:
        writer.close()
    state.stage = stage
    state.step += steps
    return state


def train_stage1(state, dataset, log_path=None):
    return train_stage(state, dataset, STAGE1, log_path)


def train_stage2(state, dataset, log_path=None):
    if state.stage not in (STAGE1,):
        raise ValueError(f"stage 2 must follow stage 1, state is at {state.stage!r}")
    return train_stage(state, dataset, STAGE2, log_path)


def finetune(state, dataset, log_path=None):
    if state.stage not in (STAGE2,):
        raise ValueError(f"fine-tuning must follow stage 2, state is at {state.stage!r}")
    return train_stage(state, dataset, FINETUNE, log_path)


# -- evaluation renders ----------------------------------------------------------


def _field_np(state: TrainState, points: np.ndarray):
    return model.field_eval_np(state.params, points)


def _sample_for_eval(state: TrainState, origins, dirs):
    sched = state.final_schedule()
    return sampling.sample_rays(
        origins,
        dirs,
        state.lattice_cfg,
        state.topo,
        state.world_vertices(),
        sched.limit,
        grid=state.grid,
        use_pruning=True,
    )


def render_stage1(state: TrainState, cam: Camera, supersample: int = 2, chunk: int = 1024) -> np.ndarray:
    """Continuous-model render: per-subpixel shaded compositing, then box average."""
    s2 = supersample * supersample
    origins, dirs = camera_rays(cam, supersample)
    shader = model.shader_layers_np(state.params, np.float64)
    out = np.zeros((len(origins), 3))
    for lo in range(0, len(origins), chunk * s2):
        hi = min(lo + chunk * s2, len(origins))
        quad = _sample_for_eval(state, origins[lo:hi], dirs[lo:hi])
        if not len(quad):
            continue
        alpha_s, feat_s = _field_np(state, quad.points)
        rgb_s = model.shade_np(shader, feat_s, dirs[lo + quad.ray_index])
        k = quad.max_rank
        n = hi - lo
        alpha = np.zeros((n, k))
        alpha[quad.ray_index, quad.rank] = alpha_s[:, 0]
        trans = np.concatenate([np.ones((n, 1)), np.cumprod(1.0 - alpha, axis=1)], axis=1)
        w = trans[:, :k] * alpha
        colors = np.zeros((n, 3))
        np.add.at(colors, quad.ray_index, w[quad.ray_index, quad.rank][:, None] * rgb_s)
        out[lo:hi] = colors
    return out.reshape(cam.height, cam.width, s2, 3).mean(axis=2)


def render_binary(
    state: TrainState,
    cam: Camera,
    supersample: int = 2,
    background=(0.0, 0.0, 0.0),
    chunk: int = 1024,
) -> np.ndarray:
    """Hard-surface render with deferred feature averaging.

    Mirrors the rasterizer semantics: first opaque hit per subpixel,
    features averaged over the 2x2 block (zeros where uncovered), one
    shader evaluation per covered pixel, background elsewhere.
    """
    s2 = supersample * supersample
    origins, dirs = camera_rays(cam, supersample)
    shader = model.shader_layers_np(state.params, np.float64)
    n_rays = len(origins)
    feat_ray = np.zeros((n_rays, 8))
    covered = np.zeros(n_rays, dtype=bool)
    for lo in range(0, n_rays, chunk * s2):
        hi = min(lo + chunk * s2, n_rays)
        quad = _sample_for_eval(state, origins[lo:hi], dirs[lo:hi])
        if not len(quad):
            continue
        alpha_s, feat_s = _field_np(state, quad.points)
        ahat = (alpha_s[:, 0] > 0.5).astype(np.float64)
        k = quad.max_rank
        n = hi - lo
        alpha = np.zeros((n, k))
        alpha[quad.ray_index, quad.rank] = ahat
        trans = np.concatenate([np.ones((n, 1)), np.cumprod(1.0 - alpha, axis=1)], axis=1)
        w = trans[:, :k] * alpha
        f = np.zeros((n, 8))
        np.add.at(f, quad.ray_index, w[quad.ray_index, quad.rank][:, None] * feat_s)
        feat_ray[lo:hi] = f
        covered[lo:hi] = w.sum(axis=1) > 0.0

    n_px = n_rays // s2
    feat_px = feat_ray.reshape(n_px, s2, 8).mean(axis=1)
    cov_px = covered.reshape(n_px, s2)
    dir_sum = (dirs * covered[:, None]).reshape(n_px, s2, 3).sum(axis=1)
    norm = np.linalg.norm(dir_sum, axis=1, keepdims=True)
    mean_d = dir_sum / np.where(norm > 0, norm, 1.0)

    img = np.tile(np.asarray(background, dtype=np.float64), (n_px, 1))
    any_cov = cov_px.any(axis=1)
    if any_cov.any():
        img[any_cov] = model.shade_np(shader, feat_px[any_cov], mean_d[any_cov])
    return img.reshape(cam.height, cam.width, 3)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str, state: TrainState):
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.run.to_dict(),
        "config_hash": state.run.hash(),
        "stage": state.stage,
        "step": state.step,
    }
    arrays = {"offsets": state.offsets.values, "grid": state.grid.values.values}
    for p in state.params.parameters():
        arrays["param:" + p.name] = p.values
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path: str) -> TrainState:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {meta['version']} unsupported (want {CHECKPOINT_VERSION})"
            )
        run = config_from_dict(meta["config"])
        state = new_state(run)
        state.offsets.values[...] = blob["offsets"]
        state.grid.values.values[...] = blob["grid"]
        for p in state.params.parameters():
            p.values[...] = blob["param:" + p.name]
        state.stage = meta["stage"]
        state.step = meta["step"]
    return state
