"""Grasp-sequence policy: graph attention encoder, REINFORCE training and the learned planner.

Several scenes are encoded together as one block-diagonal graph so a batch of
rollouts advances in lockstep with a handful of large array operations.
Base poses are always predicted one observation at a time, which keeps them
bit-identical between sampled and greedy rollouts of the same scene.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from .cost import nav_time
from .policy_base import predict_base_pose, write_log_csv
from .reach import DEFAULT_MODEL, ManipulatorModel, ik_available
from .solvers import Plan, Stop, _finish
from .world import BENCH_ANNULUS, N_CLASSES, Pose2, Scene, footprint_collides, sample_scene

GAMMA_SEQ = 1e3
T_FAIL = 30.0
ROBOT_DIM = 4
OBJ_DIM = 4 + N_CLASSES
ATTENTION_MODES = ("learned", "uniform")
BASELINE_MODES = ("greedy_rollout", "none")
SEQ_LOG_FIELDS = ("epoch", "mean_return", "baseline_return", "replaced_flag")
TRAIN_SEED_OFFSET = 2_000_003
BASELINE_EVAL_OFFSET = 3_000_017


@dataclass
class SeqHyperparams:
    n_layers: int = 5
    width: int = 64
    decoder_hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    gamma_seq: float = GAMMA_SEQ
    t_fail: float = T_FAIL
    batch_episodes: int = 64
    batches_per_epoch: int = 10
    eval_scenes: int = 128
    p_threshold: float = 0.05
    attention_mode: str = "learned"
    baseline_mode: str = "greedy_rollout"
    epochs: int = 10
    n_objects: int = 5

    def __post_init__(self):
        self.decoder_hidden = tuple(self.decoder_hidden)
        sizes = (self.n_layers, self.width, self.batch_episodes, self.batches_per_epoch,
                 self.eval_scenes, self.epochs, self.n_objects, *self.decoder_hidden)
        if any(int(v) < 1 for v in sizes):
            raise ValueError("sizes must be positive")
        if self.lr <= 0 or self.gamma_seq <= 0 or self.t_fail < 0:
            raise ValueError("lr and gamma_seq must be positive, t_fail non-negative")
        if not 0 < self.p_threshold < 1:
            raise ValueError("p_threshold must lie in (0, 1)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ValueError(f"baseline_mode must be one of {BASELINE_MODES}")


def object_features(obj) -> np.ndarray:
    onehot = np.zeros(N_CLASSES)
    onehot[obj.class_id] = 1.0
    return np.concatenate([obj.pose.features(), onehot])


@dataclass
class SceneGraph:
    """Robot node plus the un-grasped objects of one or more scenes.

    ``node_feats`` holds one row per remaining object; ``membership[i, b]``
    places node ``i`` in scene ``b`` and ``slots[i]`` is its index in that
    scene's object tuple. Neighbors are the other remaining objects of the
    same scene.
    """

    robot_feats: np.ndarray
    node_feats: np.ndarray
    membership: np.ndarray
    slots: np.ndarray
    adjacency: np.ndarray = field(init=False)

    def __post_init__(self):
        owner = self.membership.argmax(axis=1)
        self.adjacency = (owner[:, None] == owner[None, :]) & ~np.eye(len(owner), dtype=bool)

    @property
    def n_nodes(self) -> int:
        return self.node_feats.shape[0]

    @property
    def owner(self) -> np.ndarray:
        return self.membership.argmax(axis=1)


def build_graph(scenes, robots, remaining) -> SceneGraph:
    """Graph over the remaining objects; ``remaining[b][k]`` flags object k of scene b."""
    rows, owners, slots = [], [], []
    for b, (scene, mask) in enumerate(zip(scenes, remaining)):
        for k, obj in enumerate(scene.objects):
            if mask[k]:
                rows.append(object_features(obj))
                owners.append(b)
                slots.append(k)
    membership = np.zeros((len(rows), len(scenes)))
    membership[np.arange(len(rows)), owners] = 1.0
    robot_feats = np.array([r.features() for r in robots], dtype=np.float64).reshape(len(scenes), ROBOT_DIM)
    return SceneGraph(robot_feats, np.array(rows, dtype=np.float64).reshape(-1, OBJ_DIM), membership,
                      np.array(slots, dtype=int))


def scene_graph(scene: Scene, robot: Pose2 | None = None, grasped=()) -> SceneGraph:
    robot = scene.robot_start if robot is None else robot
    mask = [o.id not in set(grasped) for o in scene.objects]
    return build_graph([scene], [robot], [mask])


def init_seq_params(config: SeqHyperparams | None = None, seed: int = 0) -> nn.ParamStore:
    cfg = config or SeqHyperparams()
    store = nn.ParamStore(seed)
    obj_dim, robot_dim = OBJ_DIM, ROBOT_DIM
    for layer in range(cfg.n_layers):
        nn.init_gat_layer(store, f"gat.{layer}", obj_dim, robot_dim, cfg.width)
        obj_dim = robot_dim = cfg.width
    nn.init_mlp(store, "dec", [cfg.width, *cfg.decoder_hidden, 1])
    return store


def _n_layers(params) -> int:
    n = 0
    while f"gat.{n}.wg.W" in params:
        n += 1
    return n


def encode(params, graph: SceneGraph, attention: str = "learned", return_attention: bool = False):
    """Per-object embeddings after the stacked attention layers."""
    if graph.n_nodes < 1:
        raise nn.ShapeMismatch("encoding needs at least one remaining object")
    single = graph.robot_feats.shape[0] == 1
    membership = None if single else graph.membership
    r, h = nn.Tensor(graph.robot_feats), nn.Tensor(graph.node_feats)
    alphas = []
    for layer in range(_n_layers(params)):
        r, h, alpha = nn.gat_layer(params, f"gat.{layer}", r, h, graph.adjacency, attention, membership)
        alphas.append(alpha)
    return (h, alphas) if return_attention else h


def log_prob_grid(params, graph: SceneGraph, n_slots: int, attention: str = "learned") -> nn.Tensor:
    """Log-probabilities laid out as (scenes, n_slots); grasped slots are -inf."""
    logits = nn.mlp_forward(params, encode(params, graph, attention), "dec")
    n_scenes = graph.robot_feats.shape[0]
    index = (graph.owner, graph.slots)
    grid = nn.scatter(nn.reshape(logits, (graph.n_nodes,)), index, (n_scenes, n_slots))
    mask = np.zeros((n_scenes, n_slots), dtype=bool)
    mask[index] = True
    return nn.masked_log_softmax(grid, mask, axis=1)


def grasp_probabilities(params, graph: SceneGraph, n_slots: int | None = None,
                        attention: str = "learned") -> np.ndarray:
    """Selection probabilities for every object slot; grasped objects get exactly 0."""
    n_slots = int(graph.slots.max()) + 1 if n_slots is None else n_slots
    with nn.no_grad():
        lp = log_prob_grid(params, graph, n_slots, attention).data
    p = np.where(np.isfinite(lp), np.exp(np.where(np.isfinite(lp), lp, 0.0)), 0.0)
    return p[0] if p.shape[0] == 1 else p


def scene_probabilities(params, scene: Scene, robot: Pose2 | None = None, grasped=(),
                        attention: str = "learned") -> np.ndarray:
    return grasp_probabilities(params, scene_graph(scene, robot, grasped), scene.n_objects, attention)


@dataclass(frozen=True)
class SeqStep:
    object_id: int
    slot: int
    log_prob: float
    probs: tuple[float, ...]
    base: Pose2
    reward: float
    grasped: bool
    collided: bool


@dataclass
class Episode:
    steps: list[SeqStep]
    total_reward: float
    grasped: list[int]
    collided: bool


class _BasePoseCache:
    """Memoized single-row base pose predictions shared across rollouts."""

    def __init__(self, actor, frame_mode: str):
        self.actor, self.frame_mode, self.memo = actor, frame_mode, {}

    def __call__(self, scene: Scene, robot: Pose2, slot: int) -> Pose2:
        obj = scene.objects[slot]
        key = (robot.x, robot.y, robot.theta, obj.pose.x, obj.pose.y, obj.pose.theta, scene.table)
        if key not in self.memo:
            self.memo[key] = predict_base_pose(self.actor, robot, obj, self.frame_mode, scene.table)
        return self.memo[key]


def batch_rollout(seq_params, base_actor, scenes, mode: str = "greedy", rng=None,
                  attention: str = "learned", frame_mode: str = "object",
                  model: ManipulatorModel = DEFAULT_MODEL, gamma_seq: float = GAMMA_SEQ,
                  t_fail: float = T_FAIL, track_grad: bool = False, base_cache=None):
    """Run one episode per scene in lockstep.

    Returns the episodes and, with ``track_grad``, a tensor of shape (B,)
    holding each episode's summed log-probability of the chosen objects.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError("mode must be 'greedy' or 'sample'")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    scenes = list(scenes)
    n_scenes = len(scenes)
    n_slots = max(s.n_objects for s in scenes)
    remaining = np.zeros((n_scenes, n_slots), dtype=bool)
    for b, s in enumerate(scenes):
        remaining[b, :s.n_objects] = True
    robots = [s.robot_start for s in scenes]
    alive = np.array([s.n_objects > 0 for s in scenes])
    steps_taken = np.zeros(n_scenes, dtype=int)
    episodes = [Episode([], 0.0, [], False) for _ in scenes]
    base_cache = base_cache or _BasePoseCache(base_actor, frame_mode)
    logp_sum = None

    while True:
        active = np.flatnonzero(alive & remaining.any(axis=1)
                                & (steps_taken < np.array([s.n_objects for s in scenes])))
        if active.size == 0:
            break
        graph = build_graph([scenes[b] for b in active], [robots[b] for b in active], remaining[active])
        if track_grad:
            lp_t = log_prob_grid(seq_params, graph, n_slots, attention)
        else:
            with nn.no_grad():
                lp_t = log_prob_grid(seq_params, graph, n_slots, attention)
        lp = lp_t.data
        finite = np.isfinite(lp)
        probs = np.where(finite, np.exp(np.where(finite, lp, 0.0)), 0.0)
        if mode == "greedy":
            choice = np.where(finite, lp, -np.inf).argmax(axis=1)
        else:
            u = rng.random(active.size)
            cdf = np.cumsum(probs, axis=1)
            choice = np.array([_inverse_cdf(cdf[i], finite[i], u[i]) for i in range(active.size)])
        if track_grad:
            chosen = nn.getitem(lp_t, (np.arange(active.size), choice))
            step_sum = nn.scatter(chosen, active, (n_scenes,))
            logp_sum = step_sum if logp_sum is None else nn.add(logp_sum, step_sum)

        for i, b in enumerate(active):
            scene, k = scenes[b], int(choice[i])
            obj = scene.objects[k]
            base = base_cache(scene, robots[b], k)
            ep = episodes[b]
            steps_taken[b] += 1
            if footprint_collides(base, scene.table):
                reward = -gamma_seq * t_fail * int(remaining[b].sum())
                alive[b] = False
                ep.collided = True
                ep.steps.append(SeqStep(obj.id, k, float(lp[i, k]), tuple(probs[i, :scene.n_objects]),
                                        base, reward, False, True))
            else:
                reward = -gamma_seq * nav_time(robots[b], base)
                robots[b] = base
                ok = ik_available(model, base, obj, scene.table)
                if ok:
                    remaining[b, k] = False
                    ep.grasped.append(obj.id)
                ep.steps.append(SeqStep(obj.id, k, float(lp[i, k]), tuple(probs[i, :scene.n_objects]),
                                        base, reward, ok, False))
            ep.total_reward += reward
    return episodes, logp_sum


def _inverse_cdf(cdf: np.ndarray, valid: np.ndarray, u: float) -> int:
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    k = min(k, len(cdf) - 1)
    if not valid[k]:
        # floating-point edge: fall back to the last valid slot at or before k
        k = int(np.flatnonzero(valid[: k + 1])[-1]) if valid[: k + 1].any() else int(np.flatnonzero(valid)[0])
    return k


def rollout(seq_params, base_actor, scene: Scene, mode: str = "greedy", rng=None,
            attention: str = "learned", frame_mode: str = "object",
            model: ManipulatorModel = DEFAULT_MODEL, gamma_seq: float = GAMMA_SEQ,
            t_fail: float = T_FAIL) -> tuple[Episode, float]:
    episodes, _ = batch_rollout(seq_params, base_actor, [scene], mode, rng, attention, frame_mode,
                                model, gamma_seq, t_fail)
    return episodes[0], episodes[0].total_reward


def reinforce_loss(seq_params, base_actor, scenes, advantages, rng, attention="learned",
                   frame_mode="object", model=DEFAULT_MODEL, gamma_seq=GAMMA_SEQ, t_fail=T_FAIL,
                   episodes_and_logp=None):
    """Mean over scenes of ``-advantage * sum_t log p(chosen_t)``."""
    if episodes_and_logp is None:
        episodes_and_logp = batch_rollout(seq_params, base_actor, scenes, "sample", rng, attention,
                                          frame_mode, model, gamma_seq, t_fail, track_grad=True)
    _, logp_sum = episodes_and_logp
    adv = nn.Tensor(np.asarray(advantages, dtype=np.float64))
    return nn.mul(nn.mean(nn.mul(adv, logp_sum)), -1.0)


@dataclass
class SeqTrainResult:
    params: nn.ParamStore
    baseline_params: nn.ParamStore
    log: list[dict]
    config: SeqHyperparams


def _greedy_returns(params, base_actor, scenes, cfg: SeqHyperparams, frame_mode, model, cache):
    eps, _ = batch_rollout(params, base_actor, scenes, "greedy", None, cfg.attention_mode, frame_mode,
                           model, cfg.gamma_seq, cfg.t_fail, base_cache=cache)
    return np.array([e.total_reward for e in eps])


def train_seq_policy(config: SeqHyperparams | None = None, base_actor: nn.ParamStore | None = None,
                     seed: int = 0, frame_mode: str = "object", model: ManipulatorModel = DEFAULT_MODEL,
                     progress=None) -> SeqTrainResult:
    """REINFORCE with a greedy rollout baseline over freshly sampled scenes."""
    if base_actor is None:
        raise ValueError("a trained base pose policy is required")
    cfg = config or SeqHyperparams()
    rng = np.random.default_rng(seed)
    params = init_seq_params(cfg, seed)
    baseline = params.copy()
    opt = nn.Adam(params, lr=cfg.lr)
    cache = _BasePoseCache(base_actor, frame_mode)

    def scenes_from(base_seed, n):
        return [sample_scene(base_seed + i, cfg.n_objects, BENCH_ANNULUS) for i in range(n)]

    eval_round = 0
    eval_set = scenes_from(seed * 7919 + BASELINE_EVAL_OFFSET, cfg.eval_scenes)
    baseline_eval = _greedy_returns(baseline, base_actor, eval_set, cfg, frame_mode, model, cache)
    scene_counter = seed * 1_000_000 + TRAIN_SEED_OFFSET
    log = []
    for epoch in range(cfg.epochs):
        returns = []
        for _ in range(cfg.batches_per_epoch):
            scenes = scenes_from(scene_counter, cfg.batch_episodes)
            scene_counter += cfg.batch_episodes
            params.zero_grad()
            episodes, logp_sum = batch_rollout(params, base_actor, scenes, "sample", rng, cfg.attention_mode,
                                               frame_mode, model, cfg.gamma_seq, cfg.t_fail,
                                               track_grad=True, base_cache=cache)
            R = np.array([e.total_reward for e in episodes])
            if cfg.baseline_mode == "greedy_rollout":
                b = _greedy_returns(baseline, base_actor, scenes, cfg, frame_mode, model, cache)
            else:
                b = np.zeros_like(R)
            loss = reinforce_loss(params, base_actor, scenes, R - b, rng,
                                  episodes_and_logp=(episodes, logp_sum))
            loss.backward()
            opt.step()
            returns.append(R.mean())
            if len(cache.memo) > 200_000:
                cache.memo.clear()

        current_eval = _greedy_returns(params, base_actor, eval_set, cfg, frame_mode, model, cache)
        replaced = False
        if cfg.baseline_mode == "greedy_rollout" and current_eval.mean() > baseline_eval.mean():
            diff = current_eval - baseline_eval
            if np.all(diff == diff[0]):
                p_value = 0.0 if diff[0] > 0 else 1.0
            else:
                p_value = stats.ttest_rel(current_eval, baseline_eval, alternative="greater").pvalue
            if p_value < cfg.p_threshold:
                baseline = params.copy()
                replaced = True
                eval_round += 1
                eval_set = scenes_from(seed * 7919 + BASELINE_EVAL_OFFSET + eval_round * 100_003,
                                       cfg.eval_scenes)
                baseline_eval = _greedy_returns(baseline, base_actor, eval_set, cfg, frame_mode, model, cache)
        row = {"epoch": epoch, "mean_return": float(np.mean(returns)),
               "baseline_return": float(baseline_eval.mean()), "replaced_flag": int(replaced)}
        log.append(row)
        if progress:
            progress(row)
    return SeqTrainResult(params, baseline, log, cfg)


def plan_learned(seq_params, base_actor, scene: Scene, attention: str = "learned", frame_mode: str = "object",
                 model: ManipulatorModel = DEFAULT_MODEL, latency: float = 0.0) -> Plan:
    """Greedy rollout turned into a plan with one stop per chosen object.

    The plan stops before the first colliding base pose. An object whose
    grasp had no IK solution may be chosen again later; only its last stop
    keeps it.
    """
    t0 = time.perf_counter()
    episode, _ = rollout(seq_params, base_actor, scene, "greedy", None, attention, frame_mode, model)
    stops: list[tuple[Pose2, list[int]]] = []
    owner: dict[int, int] = {}
    for step in episode.steps:
        if step.collided:
            break
        if step.object_id in owner:
            stops[owner[step.object_id]][1].remove(step.object_id)
        owner[step.object_id] = len(stops)
        stops.append((step.base, [step.object_id]))
    plan_stops = tuple(Stop(base, tuple(ids)) for base, ids in stops)
    skipped = tuple(o.id for o in scene.objects if o.id not in owner)
    return _finish(scene, plan_stops, "LEARNED", t0, 0, latency, skipped, model)


class GraspSequencePolicy(BaseEstimator):
    """Estimator wrapper: ``fit`` trains the sequence policy on top of a base pose policy."""

    def __init__(self, base_policy=None, attention="learned", baseline="greedy_rollout", epochs=10,
                 batches_per_epoch=10, batch_episodes=64, eval_scenes=128, lr=1e-3, n_objects=5,
                 frame_mode="object", seed=0):
        self.base_policy = base_policy
        self.attention = attention
        self.baseline = baseline
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_episodes = batch_episodes
        self.eval_scenes = eval_scenes
        self.lr = lr
        self.n_objects = n_objects
        self.frame_mode = frame_mode
        self.seed = seed

    def _config(self) -> SeqHyperparams:
        return SeqHyperparams(lr=self.lr, batch_episodes=self.batch_episodes,
                              batches_per_epoch=self.batches_per_epoch, eval_scenes=self.eval_scenes,
                              attention_mode=self.attention, baseline_mode=self.baseline,
                              epochs=self.epochs, n_objects=self.n_objects)

    def _actor(self):
        if self.base_policy is None:
            raise ValueError("base_policy is required")
        check_is_fitted(self.base_policy)
        return self.base_policy.actor_

    def fit(self, X=None, y=None, progress=None):
        result = train_seq_policy(self._config(), self._actor(), self.seed, self.frame_mode, progress=progress)
        self.params_ = result.params
        self.log_ = result.log
        return self

    def predict(self, scenes) -> list[Plan]:
        check_is_fitted(self)
        actor = self._actor()
        return [plan_learned(self.params_, actor, s, self.attention, self.frame_mode) for s in scenes]

    def score(self, scenes, y=None) -> float:
        check_is_fitted(self)
        eps, _ = batch_rollout(self.params_, self._actor(), list(scenes), "greedy", None,
                               self.attention, self.frame_mode)
        return float(np.mean([e.total_reward for e in eps]))

    def save(self, path) -> None:
        check_is_fitted(self)
        nn.save_checkpoint(path, {"seq": self.params_}, asdict(self._config()), self.seed, kind="seq",
                           frame_mode=self.frame_mode)

    @classmethod
    def load(cls, path, base_policy=None) -> GraspSequencePolicy:
        stores, hp, seed, extra = nn.load_checkpoint(path)
        est = cls(base_policy=base_policy, attention=hp["attention_mode"], baseline=hp["baseline_mode"],
                  epochs=hp["epochs"], batches_per_epoch=hp["batches_per_epoch"],
                  batch_episodes=hp["batch_episodes"], eval_scenes=hp["eval_scenes"], lr=hp["lr"],
                  n_objects=hp["n_objects"], frame_mode=extra.get("frame_mode", "object"), seed=seed)
        est.params_ = stores["seq"]
        est.log_ = []
        return est


def write_seq_log(rows, path) -> None:
    write_log_csv(rows, path, SEQ_LOG_FIELDS)

