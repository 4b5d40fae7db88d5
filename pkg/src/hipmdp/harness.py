"""Experiment commands behind the CLI.

Every command is deterministic given (config, seeds): named RNG streams
are derived from (seed, domain, purpose) triples, outputs are written in
canonical order, and wall-clock columns are the only nondeterministic
fields. Checkpoints per seed live in ``<out>/seed-<k>/``:

    instances.json            pretraining task instances
    posterior_<model>.json/.bin   weight posterior per pretrained model
    embeddings_<model>.json   per-instance latent vectors
    buffer.csv                global pretraining experience snapshot
    manifest.json             resolved config + constants hashes
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bnn, dqn, envs, latent, orchestrator
from .config import ExperimentConfig, flatten
from .envs import hiv
from .errors import ConfigError
from .latent import LatentEmbedding
from .orchestrator import PretrainedArtifacts
from .replay import PrioritizedBuffer, TransitionRecord

RESULTS_SCHEMA = "hipmdp-results-v1"
TIMING_SCHEMA = "hipmdp-timing-v1"
MSE_SCHEMA = "hipmdp-model-mse-v1"
RESULT_COLUMNS = ("run_id", "domain", "variant", "seed", "episode",
                  "total_reward", "steps", "wall_ms", "model_mse")


def stream(seed: int, *names: str) -> np.random.Generator:
    """Named deterministic RNG stream."""
    entropy = [int(seed)] + [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed-{seed}"


def constants_digest() -> dict:
    return {
        "hiv_constants_version": hiv.CONSTANTS_VERSION,
        "hiv_constants_hash": hiv.constants_hash(),
    }


def write_manifest(out_dir, command: str, cfg: ExperimentConfig) -> None:
    payload = {
        "schema": "hipmdp-manifest-v1",
        "command": command,
        "config": flatten(cfg),
        "constants": constants_digest(),
    }
    canonical = json.dumps(payload, sort_keys=True).encode()
    payload["config_hash"] = hashlib.sha256(canonical).hexdigest()
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _save_embeddings(path, embeddings: dict[str, LatentEmbedding]) -> None:
    Path(path).write_text(json.dumps(
        {iid: [float(v) for v in emb.w] for iid, emb in sorted(embeddings.items())},
        indent=2,
    ))


def _load_embeddings(path) -> dict[str, LatentEmbedding]:
    doc = json.loads(Path(path).read_text())
    return {iid: LatentEmbedding(np.array(w), iid) for iid, w in doc.items()}


def _load_buffer(path, cfg: ExperimentConfig) -> PrioritizedBuffer:
    buf = cfg.replay.make_buffer()
    with Path(path).open() as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader, None)
    if header is None:
        return buf
    d = sum(1 for c in header if c.startswith("s") and c[1:].isdigit())
    priorities = []
    for row in reader:
        state = np.array([float(v) for v in row[1 : 1 + d]])
        action = int(row[1 + d])
        reward = float(row[2 + d])
        nxt = np.array([float(v) for v in row[3 + d : 3 + 2 * d]])
        done = bool(int(row[3 + 2 * d]))
        buf.push(TransitionRecord(state, action, reward, nxt, row[0], done=done))
        priorities.append(float(row[4 + 2 * d]))
    buf.set_priorities(range(len(priorities)), priorities)
    return buf


def save_artifacts(directory, arts: PretrainedArtifacts) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bnn.save_posterior(directory / f"posterior_{arts.model_key}", arts.spec,
                       arts.posterior)
    if arts.embeddings:
        _save_embeddings(directory / f"embeddings_{arts.model_key}.json",
                         arts.embeddings)


def load_artifacts(directory, model_key: str, cfg: ExperimentConfig,
                   with_buffer: bool = False) -> PretrainedArtifacts:
    directory = Path(directory)
    base = directory / f"posterior_{model_key}"
    if not Path(str(base) + ".json").exists():
        raise ConfigError(
            f"variant {model_key!r} needs a pretrain checkpoint at {base}.json"
        )
    spec, posterior = bnn.load_posterior(base)
    emb_path = directory / f"embeddings_{model_key}.json"
    embeddings = _load_embeddings(emb_path) if emb_path.exists() else {}
    instances = envs.load_instances(directory / "instances.json")
    buffer = (_load_buffer(directory / "buffer.csv", cfg)
              if with_buffer else cfg.replay.make_buffer())
    return PretrainedArtifacts(cfg.domain, model_key, spec, posterior, embeddings,
                               buffer, instances)


def cmd_pretrain(cfg: ExperimentConfig) -> None:
    """Collect pretraining experience once per seed and fit every requested
    pretrained model (embedded / linear / average) on clones of it."""
    for seed in cfg.seeds:
        directory = seed_dir(cfg.out_dir, seed)
        directory.mkdir(parents=True, exist_ok=True)
        inst_rng = stream(seed, cfg.domain, "instances")
        if cfg.domain == "nav2d":
            # one instance per wind class, as the pretraining batch expects
            instances = [
                envs.EnvInstance("nav2d", np.array([float(k % 2)]),
                                 int(inst_rng.integers(2 ** 31)))
                for k in range(cfg.pretrain.n_instances)
            ]
        else:
            instances = [envs.sample_instance(cfg.domain, inst_rng)
                         for _ in range(cfg.pretrain.n_instances)]
        envs.save_instances(directory / "instances.json", instances)
        data_rng = stream(seed, cfg.domain, "pretrain-data")
        global_buffer, per_instance = orchestrator.collect_pretraining_data(
            cfg.domain, instances, cfg, data_rng)
        global_buffer.to_csv(directory / "buffer.csv")
        for model_key in cfg.pretrain.models:
            collected = (global_buffer.clone(),
                         {iid: buf.clone() for iid, buf in per_instance.items()})
            arts = orchestrator.pretrain_batch(
                cfg.domain, instances, cfg, stream(seed, cfg.domain, "pretrain", model_key),
                model_key=model_key, collected=collected)
            save_artifacts(directory, arts)
    write_manifest(cfg.out_dir, "pretrain", cfg)


def _format_row(row: dict) -> list:
    return [row["run_id"], row["domain"], row["variant"], str(row["seed"]),
            str(row["episode"]), repr(float(row["total_reward"])),
            str(row["steps"]), str(row["wall_ms"]), repr(float(row["model_mse"]))]


def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open() as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(rows):
        row["seed"] = int(row["seed"])
        row["episode"] = int(row["episode"])
        row["total_reward"] = float(row["total_reward"])
        row["steps"] = int(row["steps"])
        row["wall_ms"] = int(row["wall_ms"])
        row["model_mse"] = float(row["model_mse"])
        out.append(row)
    return out


def _write_results(path, rows: list[dict]) -> None:
    rows = sorted(rows, key=lambda r: (r["variant"], r["seed"], r["episode"]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema={RESULTS_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(_format_row(row))


def _run_one(cfg: ExperimentConfig, variant: str, seed: int, pretrain_from) -> list[dict]:
    instance = envs.sample_instance(cfg.domain, stream(seed, cfg.domain, "instance"))
    artifacts = None
    if variant in ("embedded", "linear", "average"):
        artifacts = {variant: load_artifacts(seed_dir(pretrain_from, seed), variant, cfg)}
    outcome = orchestrator.run_variant(
        variant, artifacts, instance, cfg,
        stream(seed, cfg.domain, "run", variant),
        global_buffer=cfg.replay.make_buffer(),
    )
    run_id = f"{cfg.domain}/{variant}/s{seed}"
    return [
        {"run_id": run_id, "domain": cfg.domain, "variant": variant, "seed": seed,
         "episode": r.episode, "total_reward": r.total_reward, "steps": r.steps,
         "wall_ms": r.wall_ms, "model_mse": r.model_mse}
        for r in outcome.results
    ]


def cmd_run(cfg: ExperimentConfig, pretrain_from=None, workers: int = 1) -> Path:
    """Variant x seed grid; completed (variant, seed) pairs found in the
    results file are skipped, so interrupted grids resume."""
    pretrain_from = Path(pretrain_from) if pretrain_from else Path(cfg.out_dir)
    results_path = Path(cfg.out_dir) / "results.csv"
    rows = read_results(results_path)
    done_pairs = {(r["variant"], r["seed"]) for r in rows}
    pending = [(v, s) for v in cfg.variants for s in cfg.seeds
               if (v, s) not in done_pairs]
    # preflight: fail fast on missing checkpoints before spending compute
    for variant, seed in pending:
        if variant in ("embedded", "linear", "average"):
            base = seed_dir(pretrain_from, seed) / f"posterior_{variant}"
            if not Path(str(base) + ".json").exists():
                raise ConfigError(
                    f"variant {variant!r} needs a pretrain checkpoint at {base}.json"
                )
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, cfg, v, s, pretrain_from)
                       for v, s in pending]
            for future in futures:
                rows.extend(future.result())
    else:
        for variant, seed in pending:
            rows.extend(_run_one(cfg, variant, seed, pretrain_from))
    _write_results(results_path, rows)
    write_manifest(cfg.out_dir, "run", cfg)
    return results_path


# --- uncertainty demonstration -------------------------------------------

HIST_CELL = 0.1
REGION_HALF = 0.2  # 0.4 x 0.4 evaluation squares
REGION_GRID = 5
INTERIOR = 1.4  # region centers stay clear of the collision-heavy walls


def _visit_histogram(buffer: PrioritizedBuffer, instance_id: str) -> np.ndarray:
    edges = np.arange(-2.0, 2.0 + HIST_CELL, HIST_CELL)
    states = np.array([r.state for r in buffer.records if r.instance_id == instance_id])
    if len(states) == 0:
        return np.zeros((len(edges) - 1, len(edges) - 1))
    hist, _, _ = np.histogram2d(states[:, 0], states[:, 1], bins=(edges, edges))
    return hist


def _cell_centers() -> np.ndarray:
    edges = np.arange(-2.0, 2.0 + HIST_CELL, HIST_CELL)
    return (edges[:-1] + edges[1:]) / 2.0


def _densest_exclusive_cell(own: np.ndarray, other: np.ndarray):
    """Center of the interior cell this class visits most among cells the
    other class effectively never reaches. The shared start region is
    excluded by the other-class coverage filter; wall-adjacent cells are
    excluded because collision-blocked moves pollute predictions there."""
    centers = _cell_centers()
    threshold = max(3.0, 0.02 * other.max())
    interior = (np.abs(centers[:, None]) <= INTERIOR) & (np.abs(centers[None, :]) <= INTERIOR)
    masked = np.where(interior & (other < threshold), own, -1.0)
    if masked.max() <= 0:
        masked = np.where(interior, own - other, -np.inf)
    i, j = np.unravel_index(np.argmax(masked), masked.shape)
    return (float(centers[i]), float(centers[j]))


def _region_grid(center) -> np.ndarray:
    xs = np.linspace(center[0] - REGION_HALF, center[0] + REGION_HALF, REGION_GRID)
    ys = np.linspace(center[1] - REGION_HALF, center[1] + REGION_HALF, REGION_GRID)
    return np.array([(x, y) for x in xs for y in ys])


def _mean_predictive_std(arts: PretrainedArtifacts, points, w,
                         cfg: ExperimentConfig, rng) -> float:
    stds = []
    for point in points:
        binput = bnn.make_input(arts.spec, np.asarray(point), action=1, latent=w)  # E
        res = bnn.predict(arts.posterior, arts.spec, binput, rng,
                          cfg.bnn.predict_samples)
        stds.append(float(np.sqrt(res.variance).mean()))
    return float(np.mean(stds))


def demo_uncertainty_entry(arts: PretrainedArtifacts, cfg: ExperimentConfig,
                           seed: int) -> dict:
    """Predictive-std contrast between the region one class explored and
    the mirrored region only the other class explored."""
    red = [i for i in arts.instances if int(i.hidden_params[0]) == 0]
    blue = [i for i in arts.instances if int(i.hidden_params[0]) == 1]
    if not red or not blue:
        raise ConfigError("uncertainty demo needs one instance of each class")
    red_id, blue_id = red[0].instance_id, blue[0].instance_id
    hist_red = _visit_histogram(arts.buffer, red_id)
    hist_blue = _visit_histogram(arts.buffer, blue_id)
    center_red = _densest_exclusive_cell(hist_red, hist_blue)
    # the class symmetry (red drifts -x as blue drifts +y) mirrors a red
    # region onto the blue side through (x, y) -> (-y, -x)
    center_blue = (-center_red[1], -center_red[0])
    if np.allclose(center_red, center_blue):
        center_blue = _densest_exclusive_cell(hist_blue, hist_red)
    w_red = arts.embeddings[red_id].w
    w_blue = arts.embeddings[blue_id].w
    rng = stream(seed, "nav2d", "uncertainty")
    explored = _mean_predictive_std(arts, _region_grid(center_red), w_red, cfg, rng)
    unexplored = _mean_predictive_std(arts, _region_grid(center_blue), w_red, cfg, rng)
    blue_on_own = _mean_predictive_std(arts, _region_grid(center_blue), w_blue, cfg, rng)
    blue_on_red = _mean_predictive_std(arts, _region_grid(center_red), w_blue, cfg, rng)
    aleatoric = float(np.sqrt(np.exp(arts.posterior.noise_log_variance)).mean())
    return {
        "seed": seed,
        "region_explored_center": list(center_red),
        "region_unexplored_center": list(center_blue),
        "mean_std_explored": explored,
        "mean_std_unexplored": unexplored,
        "ratio": unexplored / explored,
        "ratio_blue": blue_on_red / blue_on_own,
        "aleatoric_std": aleatoric,
    }


def cmd_demo_uncertainty(cfg: ExperimentConfig, pretrain_from=None) -> Path:
    if cfg.domain != "nav2d":
        raise ConfigError("the uncertainty demo runs on the nav2d domain")
    pretrain_from = Path(pretrain_from) if pretrain_from else Path(cfg.out_dir)
    entries = []
    for seed in cfg.seeds:
        arts = load_artifacts(seed_dir(pretrain_from, seed), "embedded", cfg,
                              with_buffer=True)
        entries.append(demo_uncertainty_entry(arts, cfg, seed))
    out = Path(cfg.out_dir) / "uncertainty.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"schema": "hipmdp-uncertainty-v1",
                               "entries": entries}, indent=2))
    write_manifest(cfg.out_dir, "demo-uncertainty", cfg)
    return out


# --- scaling benchmark -----------------------------------------------------

BENCH_INSTANCES = 6
BENCH_EPISODES = 50
BENCH_UPDATE_EVERY = 10


def cmd_bench_scaling(cfg: ExperimentConfig, episodes: int = BENCH_EPISODES) -> Path:
    """Per-episode wall time while the model and latents train across
    instances: constant-size model updates every tenth episode on a
    growing buffer, so the per-episode cost should stay flat."""
    if cfg.domain != "nav2d":
        raise ConfigError("the scaling benchmark runs on the nav2d domain")
    seed = cfg.seeds[0]
    rng = stream(seed, "nav2d", "bench")
    scale = envs.state_scale("nav2d")
    pcfg = cfg.agent.policy_config()
    prior = cfg.bnn.prior_spec()
    spec = bnn.build_bnn_spec("embedded", 2, 4, cfg.bnn.hidden,
                              latent_dim=cfg.latent.dim)
    posterior = bnn.init_posterior(spec, rng, cfg.bnn.init_log_variance,
                                   cfg.bnn.noise_init_variance,
                                   cfg.bnn.input_noise_variance)
    rows = []
    row_idx = 0
    tune_phase = 0
    for inst_idx in range(BENCH_INSTANCES):
        instance = envs.sample_instance("nav2d", rng)
        embedding = latent.sample_prior(cfg.latent.prior(), rng, instance.instance_id)
        pair = dqn.init_pair(2, 4, cfg.agent.hidden, rng)
        adam = orchestrator.AdamState.init(pair.spec.param_count, cfg.agent.learning_rate)
        td_buffer = cfg.replay.make_buffer()
        model_buffer = cfg.replay.make_buffer()
        epsilon = cfg.agent.epsilon_start
        for ep in range(episodes):
            t0 = time.monotonic()
            state = envs.reset(instance, rng)
            for t in range(envs.episode_cap("nav2d")):
                action = dqn.select_action(pair, state / scale, epsilon, rng)
                res = envs.step(instance, state, action)
                td_buffer.push(TransitionRecord(state / scale, action, res.reward,
                                                res.next_state / scale,
                                                instance.instance_id, done=res.done))
                model_buffer.push(TransitionRecord(state.copy(), action, res.reward,
                                                   res.next_state.copy(),
                                                   instance.instance_id, done=res.done))
                if t % pcfg.update_period == 0:
                    pair, adam, _ = dqn.policy_update(pair, adam, td_buffer, pcfg, rng)
                    pair = dqn.soft_update(pair, pcfg.tau)
                state = res.next_state
                if res.done:
                    break
            epsilon = pcfg.decay(epsilon)
            tuned = (ep + 1) % BENCH_UPDATE_EVERY == 0
            if tuned:
                embedding, posterior = latent.tune_model(
                    embedding, posterior, spec,
                    prior.weight_variance(tune_phase), model_buffer,
                    cfg.bnn.alpha_config(), cfg.latent.update_config(),
                    rounds=cfg.run.tune_rounds, rng=rng)
                tune_phase += 1
            wall_ms = int(round((time.monotonic() - t0) * 1000))
            rows.append((row_idx, inst_idx, ep, wall_ms, int(tuned)))
            row_idx += 1
    out = Path(cfg.out_dir) / "timing.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        fh.write(f"# schema={TIMING_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "instance", "episode", "wall_ms", "tuned"])
        writer.writerows(rows)
    write_manifest(cfg.out_dir, "bench-scaling", cfg)
    return out


# --- model comparison ------------------------------------------------------

COMPARE_VARIANTS = ("embedded", "linear", "scratch", "average")


def _random_episode(instance, rng) -> list[TransitionRecord]:
    """Uniform-random exploration episode on the real environment."""
    state = envs.reset(instance, rng)
    records = []
    for _ in range(envs.episode_cap(instance.domain)):
        action = int(rng.integers(envs.action_count(instance.domain)))
        res = envs.step(instance, state, action)
        records.append(TransitionRecord(np.asarray(state, dtype=np.float64).copy(),
                                        action, res.reward, res.next_state.copy(),
                                        instance.instance_id, done=res.done))
        state = res.next_state
        if res.done:
            break
    return records


def compare_models_rows(cfg: ExperimentConfig, seed: int, pretrain_from) -> list:
    """Held-out one-step MSE per episode for each model variant.

    All variants see the same random-exploration episodes: each episode is
    scored before the model tunes on it, so row e reports accuracy after
    tuning on episodes 0..e-1.
    """
    instance = envs.sample_instance(cfg.domain, stream(seed, cfg.domain, "instance"))
    episodes = [_random_episode(instance, stream(seed, cfg.domain, "compare-episodes", str(e)))
                for e in range(cfg.run.n_episodes)]
    rows = []
    for variant in COMPARE_VARIANTS:
        artifacts = None
        if variant in ("embedded", "linear", "average"):
            artifacts = {variant: load_artifacts(seed_dir(pretrain_from, seed),
                                                 variant, cfg)}
        rng = stream(seed, cfg.domain, "compare", variant)
        model = orchestrator.init_variant_model(variant, artifacts, cfg.domain,
                                                cfg, rng)
        buffer = cfg.replay.make_buffer()
        for e, episode in enumerate(episodes):
            mse = orchestrator.episode_model_mse(model, cfg.domain, episode,
                                                 cfg.run.mse_samples, rng)
            rows.append((cfg.domain, variant, seed, e, mse))
            for rec in episode:
                buffer.push(TransitionRecord(rec.state, rec.action, rec.reward,
                                             rec.next_state, rec.instance_id,
                                             done=rec.done))
            model = orchestrator._tune(model, buffer, cfg, rng)
    return rows


def cmd_compare_models(cfg: ExperimentConfig, pretrain_from=None,
                       workers: int = 1) -> Path:
    pretrain_from = Path(pretrain_from) if pretrain_from else Path(cfg.out_dir)
    for seed in cfg.seeds:
        for variant in ("embedded", "linear", "average"):
            base = seed_dir(pretrain_from, seed) / f"posterior_{variant}"
            if not Path(str(base) + ".json").exists():
                raise ConfigError(
                    f"compare-models needs a pretrain checkpoint at {base}.json"
                )
    rows = []
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(compare_models_rows, cfg, seed, pretrain_from)
                       for seed in cfg.seeds]
            for future in futures:
                rows.extend(future.result())
    else:
        for seed in cfg.seeds:
            rows.extend(compare_models_rows(cfg, seed, pretrain_from))
    rows.sort(key=lambda r: (r[1], r[2], r[3]))
    out = Path(cfg.out_dir) / "model_mse.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        fh.write(f"# schema={MSE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["domain", "variant", "seed", "episode", "mse"])
        for domain, variant, seed, episode, mse in rows:
            writer.writerow([domain, variant, seed, episode, repr(float(mse))])
    write_manifest(cfg.out_dir, "compare-models", cfg)
    return out
