"""scikit-learn compatible wrapper around the gaze-supervised ViT."""

import copy
import logging
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidParameterError, TrainingDivergedError
from .gaze import reduce_fixation_map
from .losses import LossBreakdown, fax_objective
from .vit import (
    ModelConfig,
    VisionTransformer,
    deterministic_mode,
    frames_to_tensor,
    load_checkpoint,
    read_checkpoint_manifest,
    reduce_attention,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class EarlyStopping:
    """Track the best validation loss and signal when patience runs out."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, value):
        """Record ``value`` for ``epoch``; return True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def check_frames(X, image_size=None):
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise InvalidParameterError(f"expected frames of shape (n, H, W, C), got {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise InvalidParameterError(f"frames are {X.shape[1:3]}, model expects {image_size}x{image_size}")
    return X


def check_fixations(fixations, n, patch_size, normalization):
    """Accept (n, N) patch vectors or (n, H, W) maps; maps get reduced here."""
    fixations = np.asarray(fixations, dtype=np.float64)
    if fixations.shape[0] != n:
        raise InvalidParameterError(f"got {fixations.shape[0]} fixation entries for {n} frames")
    if fixations.ndim == 3:
        fixations = np.stack([reduce_fixation_map(m, patch_size, normalization) for m in fixations])
    if fixations.ndim != 2:
        raise InvalidParameterError(f"fixations must be (n, N) or (n, H, W), got {fixations.shape}")
    return fixations


class GazeViTClassifier(ClassifierMixin, BaseEstimator):
    """Left/right turn classifier trained with BCE or the FAX loss.

    With ``loss="fax"`` the training objective is
    ``(1 - lam) * BCE + lam * (1 + exp(-I))`` where ``I`` is the mean
    dot product between per-patch attention and the fixation vector.
    Fixations are only consumed by ``fit``; prediction runs the plain
    transformer.

    Parameters mirror the experiment configuration: model shape
    (``depth``, ``heads``, ``embed_dim``, ``patch_size``), optimizer
    settings, validation-based early stopping and a step learning-rate decay.
    """

    def __init__(
        self,
        depth=2,
        heads=2,
        embed_dim=64,
        patch_size=8,
        mlp_ratio=2.0,
        head_init="zeros",
        init="fan_in",
        loss="bce",
        lam=0.0,
        reduction="column",
        normalization="unit-sum",
        optimizer="sgd",
        lr=1e-3,
        momentum=0.0,
        weight_decay=0.0,
        batch_size=32,
        max_epochs=100,
        patience=20,
        lr_step_epoch=50,
        lr_gamma=0.1,
        dtype="float32",
        deterministic=True,
        random_state=0,
    ):
        self.depth = depth
        self.heads = heads
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.mlp_ratio = mlp_ratio
        self.head_init = head_init
        self.init = init
        self.loss = loss
        self.lam = lam
        self.reduction = reduction
        self.normalization = normalization
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.lr_step_epoch = lr_step_epoch
        self.lr_gamma = lr_gamma
        self.dtype = dtype
        self.deterministic = deterministic
        self.random_state = random_state

    # --- helpers -------------------------------------------------------

    def _validate_params(self):
        if self.loss not in ("bce", "fax"):
            raise InvalidParameterError(f"loss must be 'bce' or 'fax', got {self.loss!r}")
        if self.loss == "bce" and self.lam != 0:
            raise InvalidParameterError("lam is only meaningful with loss='fax'")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError(f"lam must lie in [0, 1], got {self.lam!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidParameterError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.dtype not in _DTYPES:
            raise InvalidParameterError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.patience > self.max_epochs:
            raise InvalidParameterError("patience cannot exceed max_epochs")

    @property
    def _torch_dtype(self):
        return _DTYPES[self.dtype]

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise InvalidParameterError("y contains labels not seen during fit")
        return idx

    def _build_model(self, image_size, channels):
        config = ModelConfig(
            image_size=image_size,
            patch_size=self.patch_size,
            channels=channels,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=2,
            head_init=self.head_init,
            init=self.init,
        )
        return VisionTransformer(config).to(self._torch_dtype)

    def _make_optimizer(self):
        params = self.model_.parameters()
        if self.optimizer == "sgd":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)
        return torch.optim.Adam(params, lr=self.lr, weight_decay=self.weight_decay)

    def _epoch_loss(self, X, y, fix):
        lam = self.lam if self.loss == "fax" else 0.0
        total, count = 0.0, 0
        self.model_.eval()
        with torch.no_grad():
            for start in range(0, len(X), 256):
                sl = slice(start, start + 256)
                xb = frames_to_tensor(X[sl], self._torch_dtype)
                logits, attn = self.model_(xb)
                fb = None if fix is None else torch.as_tensor(fix[sl], dtype=self._torch_dtype)
                loss, _ = fax_objective(logits, attn, torch.as_tensor(y[sl]), fb, lam, self.reduction)
                total += float(loss) * xb.shape[0]
                count += xb.shape[0]
        return total / count

    # --- sklearn API ---------------------------------------------------

    def fit(self, X, y, fixations=None, validation_data=None):
        """Train on frames ``X`` (n, H, W, C) with labels ``y``.

        ``fixations`` (required for ``loss="fax"``) are per-frame fixation
        maps or reduced patch vectors. ``validation_data`` is
        ``(X_val, y_val)`` or ``(X_val, y_val, fixations_val)``; when given,
        the epoch with the lowest validation objective is restored.
        """
        self._validate_params()
        X = check_frames(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise InvalidParameterError(f"{len(X)} frames but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) > 2:
            raise InvalidParameterError(f"expected at most two classes, got {self.classes_}")
        if len(self.classes_) == 1:
            raise InvalidParameterError("training data contains a single class")
        yi = self._encode(y)

        lam = self.lam if self.loss == "fax" else 0.0
        fix = None
        if self.loss == "fax":
            if fixations is None:
                raise InvalidParameterError("loss='fax' requires fixations")
            fix = check_fixations(fixations, len(X), self.patch_size, self.normalization)

        val = None
        if validation_data is not None:
            Xv, yv, *rest = validation_data
            Xv = check_frames(Xv, X.shape[1])
            fv = None
            if self.loss == "fax":
                if not rest or rest[0] is None:
                    raise InvalidParameterError("loss='fax' requires validation fixations")
                fv = check_fixations(rest[0], len(Xv), self.patch_size, self.normalization)
            val = (Xv, self._encode(np.asarray(yv)), fv)

        with deterministic_mode(self.random_state, enabled=self.deterministic):
            torch.manual_seed(self.random_state)
            self.model_ = self._build_model(X.shape[1], X.shape[3])
            optimizer = self._make_optimizer()
            scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=self.lr_step_epoch, gamma=self.lr_gamma)
            rng = np.random.default_rng(self.random_state)
            stopper = EarlyStopping(self.patience)
            best_state = copy.deepcopy(self.model_.state_dict())
            self.history_, self.step_log_ = [], []

            for epoch in range(1, self.max_epochs + 1):
                self.model_.train()
                order = rng.permutation(len(X))
                train_total = 0.0
                for b, start in enumerate(range(0, len(X), self.batch_size)):
                    idx = order[start:start + self.batch_size]
                    xb = frames_to_tensor(X[idx], self._torch_dtype)
                    yb = torch.as_tensor(yi[idx])
                    fb = None if fix is None else torch.as_tensor(fix[idx], dtype=self._torch_dtype)
                    logits, attn = self.model_(xb)
                    loss, breakdown = fax_objective(logits, attn, yb, fb, lam, self.reduction)
                    if not torch.isfinite(loss):
                        batch_id = f"epoch{epoch}-batch{b}"
                        self.failed_batch_ = {"batch_id": batch_id, "indices": idx.tolist()}
                        raise TrainingDivergedError(f"non-finite loss at {batch_id}", batch_id=batch_id)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    self.step_log_.append(breakdown)
                    train_total += breakdown.l_fax * len(idx)
                scheduler.step()

                record = {"epoch": epoch, "train_loss": train_total / len(X)}
                if val is not None:
                    record["val_loss"] = self._epoch_loss(*val)
                    stop = stopper.update(epoch, record["val_loss"])
                    if stopper.best_epoch == epoch:
                        best_state = copy.deepcopy(self.model_.state_dict())
                    self.history_.append(record)
                    logger.debug("epoch %d train %.4f val %.4f", epoch, record["train_loss"], record["val_loss"])
                    if stop:
                        break
                else:
                    self.history_.append(record)
                    best_state = copy.deepcopy(self.model_.state_dict())
                    stopper.best_epoch = epoch

            self.model_.load_state_dict(best_state)
            self.model_.eval()
            self.best_epoch_ = stopper.best_epoch
            self.n_epochs_ = len(self.history_)
        return self

    def _forward(self, X, batch=256):
        check_is_fitted(self, "model_")
        X = check_frames(X, self.model_.config.image_size)
        logits, attns = [], []
        self.model_.eval()
        with torch.no_grad():
            for start in range(0, len(X), batch):
                out, attn = self.model_(frames_to_tensor(X[start:start + batch], self._torch_dtype))
                logits.append(out)
                attns.append(attn)
        return torch.cat(logits), torch.cat(attns)

    def predict_proba(self, X):
        logits, _ = self._forward(X)
        return torch.softmax(logits.double(), dim=-1).numpy()

    def predict(self, X):
        """First class (``left``) wins whenever its probability is >= 0.5."""
        proba = self.predict_proba(X)
        return np.where(proba[:, 0] >= 0.5, self.classes_[0], self.classes_[1])

    def attention(self, X):
        """Full attention tensor, shape (n, L, A, N + 1, N + 1)."""
        return self._forward(X)[1].double().numpy()

    def reduced_attention(self, X):
        return reduce_attention(self._forward(X)[1].double(), self.reduction).numpy()

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, extra={"classes": self.classes_.tolist(), "params": self.get_params()})

    @classmethod
    def from_checkpoint(cls, path):
        """A fitted estimator that holds only the plain transformer."""
        manifest = read_checkpoint_manifest(path)
        est = cls(**manifest["extra"].get("params", {}))
        est.model_ = load_checkpoint(path, dtype=_DTYPES[est.dtype])
        est.classes_ = np.asarray(manifest["extra"].get("classes", ["left", "right"]))
        return est


def breakdown_records(step_log):
    return [bd.to_record(i) for i, bd in enumerate(step_log) if isinstance(bd, LossBreakdown)]


__all__ = ["GazeViTClassifier", "EarlyStopping", "breakdown_records"]
