"""scikit-learn style front ends: a batcher, an FFD packer and a DPO trainer."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dpo import MetricsLogger, batch_logprobs, reference_logprobs, train_step
from .layout import format_tag, truncate_sample
from .masks import DEFAULT_BLOCK_SIZE
from .model import ModelConfig, init, load_checkpoint, make_optimizer, rng_stream, save_checkpoint
from .packing import build_batches, ffd_pack, packing_capacity, unit_length
from .validation import check_lengths, check_samples, check_vocab


class PreferenceBatcher(TransformerMixin, BaseEstimator):
    """Turn preference samples into collated batches in one row format.

    ``fit`` learns the packing capacity (``bsz`` times the longest packing
    unit) when ``packing`` is on; ``transform`` returns a list of
    :class:`~prefix_dpo.layout.Batch`.
    """

    def __init__(self, format="shared", packing=False, bsz=4, pad_token_id=0,
                 max_prompt_len=None, max_seq_len=None):
        self.format = format
        self.packing = packing
        self.bsz = bsz
        self.pad_token_id = pad_token_id
        self.max_prompt_len = max_prompt_len
        self.max_seq_len = max_seq_len

    def _prepare(self, X):
        return [truncate_sample(s, self.max_prompt_len, self.max_seq_len) for s in check_samples(X)]

    def fit(self, X, y=None):
        samples = self._prepare(X)
        self.format_tag_ = format_tag(self.format, self.packing)
        self.n_samples_ = len(samples)
        self.capacity_ = packing_capacity(samples, self.format, self.bsz) if self.packing else None
        return self

    def plan(self, X):
        check_is_fitted(self, "format_tag_")
        samples = self._prepare(X)
        return ffd_pack([unit_length(s, self.format) for s in samples], self.capacity_)

    def transform(self, X):
        check_is_fitted(self, "format_tag_")
        samples = self._prepare(X)
        plan = self.plan(samples) if self.packing else None
        return build_batches(samples, self.format, self.packing, self.bsz,
                             pad_token=self.pad_token_id, plan=plan)


class FFDPacker(ClusterMixin, BaseEstimator):
    """First-Fit-Decreasing bin assignment of integer lengths.

    ``labels_`` holds the bin index of each item. With ``capacity=None`` the
    capacity is ``bsz * max(lengths)``.
    """

    def __init__(self, capacity=None, bsz=4):
        self.capacity = capacity
        self.bsz = bsz

    def fit(self, X, y=None):
        lengths = check_lengths(X)
        cap = self.capacity if self.capacity is not None else self.bsz * int(lengths.max())
        self.plan_ = ffd_pack(lengths.tolist(), cap)
        self.capacity_ = cap
        labels = np.empty(len(lengths), dtype=np.int64)
        for b, members in enumerate(self.plan_.bins):
            labels[members] = b
        self.labels_ = labels
        self.n_bins_ = len(self.plan_.bins)
        self.efficiency_ = self.plan_.efficiency()
        return self


class DPOTrainer(BaseEstimator):
    """Train a toy transformer policy with DPO against its frozen initial copy.

    The policy starts from the reference parameters (``init`` with
    ``random_state``). Reference log-probs are computed once per ``fit``.
    With ``warm_start=True`` a second ``fit`` continues from the current
    policy, optimizer state and step counter.
    """

    def __init__(self, vocab_size=64, d_model=32, n_layers=2, n_heads=4, d_ff=64,
                 rope_theta=10000.0, init_std=0.02, precision="f64", beta=0.1,
                 optimizer="adamw", lr=1e-3, weight_decay=0.0, steps=50, format="shared",
                 packing=False, bsz=4, block_size=DEFAULT_BLOCK_SIZE, pad_token_id=0,
                 max_prompt_len=None, max_seq_len=None, shuffle=False, random_state=0,
                 metrics_path=None, warm_start=False, verbose=False):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.rope_theta = rope_theta
        self.init_std = init_std
        self.precision = precision
        self.beta = beta
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = steps
        self.format = format
        self.packing = packing
        self.bsz = bsz
        self.block_size = block_size
        self.pad_token_id = pad_token_id
        self.max_prompt_len = max_prompt_len
        self.max_seq_len = max_seq_len
        self.shuffle = shuffle
        self.random_state = random_state
        self.metrics_path = metrics_path
        self.warm_start = warm_start
        self.verbose = verbose

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, d_ff=self.d_ff, rope_theta=self.rope_theta,
                           precision=self.precision, seed=self.random_state, init_std=self.init_std)

    def _batcher(self):
        return PreferenceBatcher(self.format, self.packing, self.bsz, self.pad_token_id,
                                 self.max_prompt_len, self.max_seq_len)

    def _make_optimizer(self):
        if self.optimizer == "adamw":
            return make_optimizer("adamw", self.lr, weight_decay=self.weight_decay)
        return make_optimizer(self.optimizer, self.lr)

    def fit(self, X, y=None):
        samples = check_samples(X)
        check_vocab(samples, self.vocab_size)
        batches = self._batcher().fit(samples).transform(samples)
        if not (self.warm_start and hasattr(self, "params_")):
            self.ref_params_ = init(self.model_config())
            self.params_ = self.ref_params_.copy()
            self.optimizer_ = self._make_optimizer()
            self.step_ = 0
            self.history_ = []
        self.ref_cache_ = reference_logprobs(self.ref_params_, batches, self.block_size)
        logger = MetricsLogger(self.metrics_path)
        order = list(range(len(batches)))
        epoch = None
        for _ in range(self.steps):
            e, k = divmod(self.step_, len(batches))
            if self.shuffle and e != epoch:
                order = rng_stream(self.random_state, f"shuffle/{e}").permutation(len(batches)).tolist()
                epoch = e
            batch = batches[order[k]]
            t0 = time.perf_counter()
            self.params_, result = train_step(self.params_, self.ref_cache_, batch, self.beta,
                                              self.optimizer_, self.block_size)
            self.step_ += 1
            rec = logger.log(self.step_, result, batch.num_tokens, time.perf_counter() - t0)
            self.history_.append(rec)
            if self.verbose:
                print(f"step {rec['step']} loss {rec['loss']:.6f} acc {rec['accuracy']:.3f}")
        return self

    def predict_logprobs(self, X, reference: bool = False) -> np.ndarray:
        """``(n, 2)`` array of (chosen, rejected) completion log-prob sums."""
        check_is_fitted(self, "params_")
        samples = check_samples(X)
        params = self.ref_params_ if reference else self.params_
        values = {}
        for batch in self._batcher().fit(samples).transform(samples):
            values.update(batch_logprobs(params, batch, self.block_size).as_dict())
        return np.array([values[i] for i in range(len(samples))])

    def decision_function(self, X) -> np.ndarray:
        """Per-sample DPO margin under the current policy."""
        pol = self.predict_logprobs(X)
        ref = self.predict_logprobs(X, reference=True)
        return self.beta * ((pol[:, 0] - ref[:, 0]) - (pol[:, 1] - ref[:, 1]))

    def score(self, X, y=None) -> float:
        """Fraction of samples whose margin is positive."""
        return float(np.mean(self.decision_function(X) > 0))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.step_, self.optimizer_,
                        extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path, **overrides) -> "DPOTrainer":
        params, step, optimizer, extra = load_checkpoint(path)
        est = cls(**{**extra.get("estimator_params", {}), **overrides})
        est.params_ = params
        est.ref_params_ = init(params.config)
        est.optimizer_ = optimizer if optimizer is not None else est._make_optimizer()
        est.step_ = step
        est.history_ = []
        est.warm_start = True
        return est
