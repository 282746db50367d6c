"""Deep Q-learning with replay memory, plus concurrent boundary-regressor training."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .environment import HISTORY_LEN, Episode, EpisodeConfig, random_initial_window
from .features import VideoRecord
from .geometry import NUM_ACTIONS, AgentAction, iou
from .qnet import Network, NetworkConfig, OptimizerState, sgd_step
from .regressor import encode_offsets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    episodes_per_video: int = 3
    batch_size: int = 200
    replay_capacity: int = 2000
    gamma: float = 0.5
    eps_start: float = 1.0
    eps_end: float = 0.1
    target_sync_interval: int = 100
    use_target_net: bool = True
    terminal_triggers: bool = True
    hidden_dims: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.2
    q_lr: float = 1e-3
    q_decay: float = 5e-5
    reg_lr: float = 1e-4
    reg_decay: float = 9e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.epochs < 0 or self.episodes_per_video < 1:
            raise ValueError("need epochs >= 0 and episodes_per_video >= 1")
        if not 1 <= self.batch_size <= self.replay_capacity:
            raise ValueError("need 1 <= batch_size <= replay_capacity")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.target_sync_interval < 1:
            raise ValueError("target_sync_interval must be >= 1")


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: Optional[np.ndarray]
    terminal: bool
    # regression target, set only for correct triggers
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.next_state is None) != self.terminal:
            raise ValueError("next_state must be absent exactly for terminal transitions")


class ReplayMemory:
    """Fixed-capacity ring buffer; a push beyond capacity evicts the oldest record."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def ordered(self) -> list[Transition]:
        """Contents from oldest to newest."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]


def sample_batch(memory: ReplayMemory, batch_size: int, rng) -> list[Transition]:
    """Uniform sampling with replacement."""
    if len(memory) < batch_size:
        raise ValueError(f"replay memory holds {len(memory)} records, batch needs {batch_size}")
    idx = rng.integers(0, len(memory), size=batch_size)
    return [memory[int(i)] for i in idx]


def epsilon_at(progress: float, cfg: TrainConfig) -> float:
    progress = min(max(progress, 0.0), 1.0)
    # convex form keeps both endpoints exact
    return (1.0 - progress) * cfg.eps_start + progress * cfg.eps_end


def select_action(net: Network, state_vec: np.ndarray, epsilon: float, rng) -> AgentAction:
    """Epsilon-greedy; ``np.argmax`` breaks ties toward the lowest ordinal."""
    if rng.random() < epsilon:
        return AgentAction(int(rng.integers(NUM_ACTIONS)))
    return AgentAction(int(np.argmax(net.predict(state_vec))))


def td_target(t: Transition, target_net: Network, gamma: float) -> float:
    if t.terminal:
        return float(t.reward)
    return float(t.reward + gamma * np.max(target_net.predict(t.next_state)))


def td_targets(batch: list[Transition], target_net: Network, gamma: float) -> np.ndarray:
    """Vectorised :func:`td_target` over a minibatch."""
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live and gamma > 0:
        nxt = np.stack([batch[i].next_state for i in live])
        rewards[live] += gamma * target_net.predict(nxt).max(axis=1)
    return rewards


@dataclass
class EpochLog:
    epoch: int
    avg_reward: float
    avg_td_loss: float
    avg_reg_loss: float
    epsilon: float
    trigger_precision: float
    episode_rewards: list = field(default_factory=list, repr=False)


@dataclass
class ClassModel:
    class_id: int
    q_net: Network
    regressor: Network
    q_opt: OptimizerState
    reg_opt: OptimizerState
    log: list[EpochLog] = field(default_factory=list)


LOG_FIELDS = ("epoch", "avg_reward", "avg_td_loss", "avg_reg_loss", "epsilon", "trigger_precision")


def log_csv(entries: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for e in entries:
        w.writerow([e.epoch, repr(e.avg_reward), repr(e.avg_td_loss), repr(e.avg_reg_loss),
                    repr(e.epsilon), repr(e.trigger_precision)])
    return buf.getvalue()


def new_class_model(class_id: int, feature_dim: int, state_dim: int, cfg: TrainConfig) -> ClassModel:
    q_cfg = NetworkConfig(state_dim, NUM_ACTIONS, cfg.hidden_dims, cfg.dropout_rate,
                          seed=cfg.seed * 1000 + 2 * class_id)
    r_cfg = NetworkConfig(feature_dim, 2, cfg.hidden_dims, cfg.dropout_rate,
                          seed=cfg.seed * 1000 + 2 * class_id + 1)
    return ClassModel(class_id, Network(q_cfg), Network(r_cfg),
                      OptimizerState(cfg.q_lr, cfg.q_decay), OptimizerState(cfg.reg_lr, cfg.reg_decay))


def _best_gt(window, gts):
    return max(gts, key=lambda g: iou(window, g))


def train_class_model(videos: list[VideoRecord], class_id: int, cfg: TrainConfig,
                      env_cfg: EpisodeConfig, model: ClassModel | None = None,
                      start_epoch: int = 0) -> ClassModel:
    """Train the Q-network and regressor for one class.

    Only ground truths of ``class_id`` count for rewards. Passing an existing
    ``model`` resumes training, continuing its optimizer step counters;
    ``start_epoch`` offsets the epsilon schedule and the log.
    """
    pool = [v.restricted_to(class_id) for v in videos if v.has_class(class_id)]
    if not pool:
        raise ValueError(f"no training videos contain class {class_id}")
    dim = pool[0].dim
    if model is None:
        model = new_class_model(class_id, dim, dim + HISTORY_LEN * NUM_ACTIONS, cfg)
    rng = np.random.default_rng([cfg.seed, class_id, start_epoch])
    q_net, reg_net = model.q_net, model.regressor
    target = q_net.copy() if cfg.use_target_net else q_net
    memory = ReplayMemory(cfg.replay_capacity)
    updates = 0
    total_epochs = start_epoch + cfg.epochs

    for epoch in range(start_epoch, total_epochs):
        progress = epoch / (total_epochs - 1) if total_epochs > 1 else 1.0
        eps = epsilon_at(progress, cfg)
        ep_rewards, td_losses, reg_losses = [], [], []
        triggers = correct = 0
        for vi in rng.permutation(len(pool)):
            video = pool[int(vi)]
            gts = video.gt_windows
            for _ in range(cfg.episodes_per_video):
                episode = Episode(video, env_cfg, random_initial_window(video, env_cfg, rng),
                                  mode="train", rng=rng)
                state_vec = episode.state.vector()
                total = 0.0
                while not episode.terminated:
                    action = select_action(q_net, state_vec, eps, rng)
                    out = episode.step(action)
                    total += out.reward
                    next_vec = out.next_state.vector()
                    offsets = None
                    if out.action == AgentAction.TRIGGER:
                        triggers += 1
                        terminal = cfg.terminal_triggers
                        if out.trigger_correct:
                            correct += 1
                            offsets = np.asarray(encode_offsets(out.attended, _best_gt(out.attended, gts)),
                                                 dtype=np.float32)
                    else:
                        # running out of steps is a time limit, not a terminal state
                        terminal = False
                    memory.push(Transition(state_vec, int(out.action), out.reward,
                                           None if terminal else next_vec, terminal, offsets))
                    state_vec = next_vec

                    if len(memory) >= cfg.batch_size:
                        batch = sample_batch(memory, cfg.batch_size, rng)
                        td_losses.append(_q_update(q_net, target, model.q_opt, batch, cfg, rng))
                        reg_loss = _reg_update(reg_net, model.reg_opt, batch, dim, rng)
                        if reg_loss is not None:
                            reg_losses.append(reg_loss)
                        updates += 1
                        if cfg.use_target_net and updates % cfg.target_sync_interval == 0:
                            target.load_from(q_net)
                ep_rewards.append(total)
        entry = EpochLog(
            epoch=epoch,
            avg_reward=float(np.mean(ep_rewards)),
            avg_td_loss=float(np.mean(td_losses)) if td_losses else 0.0,
            avg_reg_loss=float(np.mean(reg_losses)) if reg_losses else 0.0,
            epsilon=eps,
            trigger_precision=correct / triggers if triggers else 0.0,
            episode_rewards=ep_rewards,
        )
        model.log.append(entry)
        log.info("class %d epoch %d: reward %.3f td %.4f reg %.4f eps %.2f prec %.2f", class_id, epoch,
                 entry.avg_reward, entry.avg_td_loss, entry.avg_reg_loss, eps, entry.trigger_precision)
    return model


def _q_update(q_net: Network, target: Network, opt: OptimizerState, batch, cfg: TrainConfig, rng) -> float:
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    targets = td_targets(batch, target, cfg.gamma)
    _, cache = q_net.forward(states, train=True, rng=rng)
    grads, loss = q_net.backward_td(cache, actions, targets)
    sgd_step(q_net, grads, opt)
    return loss


def _reg_update(reg_net: Network, opt: OptimizerState, batch, dim: int, rng) -> float | None:
    # the loss averages over the correct triggers present in this minibatch
    hits = [t for t in batch if t.offsets is not None]
    if not hits:
        return None
    feats = np.stack([t.state[:dim] for t in hits])
    offsets = np.stack([t.offsets for t in hits])
    _, cache = reg_net.forward(feats, train=True, rng=rng)
    grads, loss = reg_net.backward_l1(cache, offsets)
    sgd_step(reg_net, grads, opt)
    return loss
