"""Online station-demand forecasting with a Seq2Seq recurrent model.

Per-minute station samples aggregate into fixed-width windows (default
240 s = 4 samples). Each closed window yields a station-feature snapshot
(the features at the closing sample) and a demand vector (mean queued plus
charging count over the window's samples). An encoder LSTM reads the
``enc_len`` snapshots, its final state seeds a decoder LSTM that emits
``dec_len`` demand vectors through a linear head.

Training is teacher-forced: decoder inputs are the ground-truth demands
shifted one window back from the targets. Inference is autoregressive: the
first decoder input is the most recent observed demand, then the head's own
raw output. Training pairs only ever map strictly past windows to strictly
future windows, and the online trigger fires whenever the pair buffer size
is both >= ``min_buffer`` and a multiple of ``train_every``, until the
smoothed loss flattens out (see ``convergence_check``); after that the
model keeps predicting but stops training and the buffer stops growing.
"""

from __future__ import annotations

import numpy as np

from .nn import LSTM, Adam, DenseNet
from .scenario import PredictorConfig, ScenarioConfig


def average_demand(occupancy_samples) -> np.ndarray:
    """Per-station mean of queued+charging counts over sampled instants."""
    arr = np.asarray(occupancy_samples, dtype=float)
    if arr.size == 0:
        raise ValueError("empty demand window")
    return arr.mean(axis=0)


class DemandHistory:
    """Aggregates a growing minute log into demand windows.

    ``sync`` consumes new rows of the environment's minute log, whose rows
    start with (t, occupancy vector, station feature vector, ...). Every
    ``window_s / sample_s`` rows close one window.
    """

    def __init__(self, window_s: float = 240.0, sample_s: float = 60.0):
        if window_s % sample_s != 0:
            raise ValueError("window_s must be a multiple of sample_s")
        self.per_window = int(window_s // sample_s)
        self.snapshots = []      # station features at each window close
        self.demands = []        # mean occupancy per window
        self._occ_acc = []
        self._consumed = 0

    def __len__(self):
        return len(self.demands)

    def sync(self, minute_log) -> int:
        """Consume unseen minute rows; returns how many windows closed."""
        closed = 0
        for row in minute_log[self._consumed:]:
            self._occ_acc.append(np.asarray(row[1], dtype=float))
            if len(self._occ_acc) == self.per_window:
                self.demands.append(average_demand(self._occ_acc))
                self.snapshots.append(np.asarray(row[2], dtype=float).copy())
                self._occ_acc = []
                closed += 1
        self._consumed = len(minute_log)
        return closed


class PredictorBuffer:
    """Training pairs at the window timescale.

    The pair closed by window w (0-based) needs every index down to
    w - dec_len - enc_len + 1 to exist, so pairs start at
    w = enc_len + dec_len - 1. Encoder inputs are the enc_len snapshots
    ending at w - dec_len; targets are the dec_len demands ending at w;
    decoder inputs are the targets shifted one window back.
    """

    def __init__(self, enc_len: int, dec_len: int):
        self.enc_len = enc_len
        self.dec_len = dec_len
        self.enc_inputs = []
        self.dec_inputs = []
        self.targets = []
        self._next_w = enc_len + dec_len - 1

    def __len__(self):
        return len(self.targets)

    def add_next(self, history: DemandHistory) -> bool:
        """Append the next pending pair if its window has closed."""
        w = self._next_w
        if w >= len(history):
            return False
        le, ld = self.enc_len, self.dec_len
        self.enc_inputs.append(np.stack(history.snapshots[w - ld - le + 1:w - ld + 1]))
        self.dec_inputs.append(np.stack(history.demands[w - ld:w]))
        self.targets.append(np.stack(history.demands[w - ld + 1:w + 1]))
        self._next_w += 1
        return True

    def rebase(self):
        """Start reading a fresh (e.g. new-episode) history; pairs are kept."""
        self._next_w = self.enc_len + self.dec_len - 1


def convergence_check(losses, window: int = 10, smooth: int = 5,
                      tol: float = 0.02) -> bool:
    """True when the smoothed loss moved < tol relatively over the last
    ``window`` train steps (trailing-``smooth`` moving average)."""
    if len(losses) < window:
        return False

    def smoothed(i):
        return float(np.mean(losses[max(0, i - smooth + 1):i + 1]))

    now = smoothed(len(losses) - 1)
    then = smoothed(len(losses) - window)
    return abs(now - then) / max(abs(then), 1e-12) < tol


def augment_state(state, prediction, piles) -> np.ndarray:
    """Append pile-normalized, non-negative predictions to a state vector."""
    pred = np.asarray(prediction, dtype=float)
    piles = np.asarray(piles, dtype=float)
    if pred.ndim != 2 or pred.shape[1] != piles.shape[0]:
        raise ValueError(f"prediction shape {pred.shape} does not match "
                         f"{piles.shape[0]} stations")
    scaled = np.clip(pred, 0.0, None) / piles
    return np.concatenate([np.asarray(state, dtype=float), scaled.reshape(-1)])


class Seq2SeqForecaster:
    """Encoder-decoder LSTM pair with a shared linear output head."""

    def __init__(self, n_stations: int, feat_dim: int, cfg: PredictorConfig, rng):
        self.n_stations = n_stations
        self.cfg = cfg
        self.encoder = LSTM(feat_dim, cfg.hidden, cfg.layers, cfg.dropout, rng)
        self.decoder = LSTM(n_stations, cfg.hidden, cfg.layers, cfg.dropout, rng)
        self.head = DenseNet([cfg.hidden, n_stations], rng)
        self._rng = rng
        self.optimizer = Adam(self.param_dict(), cfg.lr)
        self.losses = []
        self.converged = False

    def param_dict(self):
        out = {}
        for prefix, net in (("enc.", self.encoder), ("dec.", self.decoder),
                            ("head.", self.head)):
            for k, v in net.param_dict().items():
                out[prefix + k] = v
        return out

    def predict(self, snapshots, last_demand) -> np.ndarray:
        """Autoregressive forecast: (enc_len, feat) history -> (dec_len, M)."""
        snaps = np.asarray(snapshots, dtype=float)
        if snaps.shape[0] != self.cfg.enc_len:
            raise ValueError(f"need exactly {self.cfg.enc_len} snapshots")
        _, state, _ = self.encoder.forward(snaps[:, None, :])
        x = np.asarray(last_demand, dtype=float)[None, None, :]
        preds = np.empty((self.cfg.dec_len, self.n_stations))
        for j in range(self.cfg.dec_len):
            out, state, _ = self.decoder.forward(x, state=state)
            y, _ = self.head.forward(out[0])
            preds[j] = y[0]
            x = y[None, :, :]
        return preds

    def train_step(self, buffer: PredictorBuffer, iters=None, batch=None) -> float:
        """Teacher-forced Adam updates on sampled minibatches; mean loss."""
        iters = self.cfg.iters_per_step if iters is None else iters
        batch = self.cfg.batch if batch is None else batch
        if len(buffer) < batch:
            raise ValueError(f"buffer holds {len(buffer)} pairs, need {batch}")
        params = self.param_dict()
        losses = np.empty(iters)
        for it in range(iters):
            idx = self._rng.choice(len(buffer), size=batch, replace=False)
            enc_x = np.stack([buffer.enc_inputs[i] for i in idx], axis=1)
            dec_x = np.stack([buffer.dec_inputs[i] for i in idx], axis=1)
            target = np.stack([buffer.targets[i] for i in idx], axis=1)

            _, enc_state, enc_cache = self.encoder.forward(
                enc_x, training=True, dropout_rng=self._rng)
            dec_out, _, dec_cache = self.decoder.forward(
                dec_x, state=enc_state, training=True, dropout_rng=self._rng)
            ld, b, hid = dec_out.shape
            flat, head_cache = self.head.forward(dec_out.reshape(ld * b, hid))
            diff = flat.reshape(ld, b, -1) - target
            losses[it] = float(np.mean(diff * diff))

            dflat = (2.0 * diff / diff.size).reshape(ld * b, -1)
            head_grads, dout = self.head.backward(head_cache, dflat)
            dec_grads, _, dstate0 = self.decoder.backward(
                dec_cache, dout.reshape(ld, b, hid))
            enc_grads, _, _ = self.encoder.backward(
                enc_cache, np.zeros((enc_x.shape[0], b, hid)), grad_state=dstate0)

            grads = {}
            for prefix, gd in (("enc.", enc_grads), ("dec.", dec_grads),
                               ("head.", head_grads)):
                for k, v in gd.items():
                    grads[prefix + k] = v
            self.optimizer.step(params, grads)
        mean_loss = float(losses.mean())
        self.losses.append(mean_loss)
        return mean_loss


class OnlinePredictor:
    """Owns the per-episode history and the cross-episode buffer and model.

    ``observe`` must be called after every environment advance; it closes
    windows, appends training pairs one at a time, and honors the online
    train trigger until convergence. ``predict`` returns the latest
    (dec_len, M) forecast, memoized per (history length, train count).
    """

    def __init__(self, cfg: ScenarioConfig, seed: int):
        p = cfg.predictor
        self.pcfg = p
        self.piles = np.array([s.piles for s in cfg.stations], dtype=float)
        self.buffer = PredictorBuffer(p.enc_len, p.dec_len)
        self.model = Seq2SeqForecaster(
            cfg.n_stations, 9 * cfg.n_stations, p,
            np.random.default_rng([seed, cfg.seed, 3]))
        self.history = DemandHistory(p.window_s, p.sample_s)
        self.train_log = []      # (buffer size at trigger, mean loss)
        self._memo = None

    @property
    def converged(self) -> bool:
        return self.model.converged

    def start_episode(self):
        self.history = DemandHistory(self.pcfg.window_s, self.pcfg.sample_s)
        self.buffer.rebase()
        self._memo = None

    def observe(self, minute_log):
        if self.history.sync(minute_log) == 0:
            return
        self._memo = None
        if self.model.converged:
            return
        p = self.pcfg
        while self.buffer.add_next(self.history):
            n = len(self.buffer)
            if n >= p.min_buffer and n % p.train_every == 0:
                loss = self.model.train_step(self.buffer)
                self.train_log.append((n, loss))
                if convergence_check(self.model.losses, p.converge_window,
                                     tol=p.converge_tol):
                    self.model.converged = True
                    break

    def predict(self) -> np.ndarray:
        key = (len(self.history), len(self.model.losses))
        if self._memo is None or self._memo[0] != key:
            snaps = np.stack(self.history.snapshots[-self.pcfg.enc_len:])
            pred = self.model.predict(snaps, self.history.demands[-1])
            self._memo = (key, pred)
        return self._memo[1]

    def augment(self, state) -> np.ndarray:
        return augment_state(state, self.predict(), self.piles)
