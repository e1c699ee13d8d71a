"""Classification loss, fixation-attention intersection and their weighted mix.

All functions take and return torch tensors so the whole path stays
differentiable; gradients reach the query/key projections through the
softmax attention weights.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ._validation import check_fraction
from .exceptions import InvalidParameterError
from .vit import reduce_attention

PROB_FLOOR = 1e-12
LAMBDA_GRID = (0.0, 0.01, 0.1, 0.2, 0.8, 1.0)


@dataclass
class LossBreakdown:
    bce: float
    intersection: float
    l_int: float
    l_fax: float
    lam: float

    def to_record(self, step):
        return {"step": step, **asdict(self)}


def bce_loss(probs, labels):
    """``-c1 log m1 - c2 log m2`` per sample; ``labels`` are class indices (0 = left).

    Probabilities are clamped at 1e-12 before the log.
    """
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def intersection(reduced_attention, f_red):
    """Mean over layers and heads of ``a_(l,a) . f_red``.

    ``reduced_attention`` is ``(..., L, A, N)`` and ``f_red`` is ``(..., N)``.
    """
    reduced_attention = torch.as_tensor(reduced_attention)
    f_red = torch.as_tensor(f_red, dtype=reduced_attention.dtype)
    if reduced_attention.shape[-1] != f_red.shape[-1]:
        raise InvalidParameterError(
            f"attention vectors have length {reduced_attention.shape[-1]}, fixation vector {f_red.shape[-1]}"
        )
    dots = (reduced_attention * f_red[..., None, None, :]).sum(-1)
    return dots.mean(dim=(-2, -1))


def intersection_loss(value):
    """``1 / sigmoid(I)``, written as ``1 + exp(-I)``."""
    if not torch.is_tensor(value):
        value = torch.as_tensor(value, dtype=torch.float64)
    return 1.0 + torch.exp(-value)


def fax_loss(bce, l_int, lam):
    if not isinstance(lam, (int, float)) or not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda must lie in [0, 1], got {lam!r}")
    return (1.0 - lam) * bce + lam * l_int


def fax_objective(logits, attention, labels, f_red=None, lam=0.0, reduction="column"):
    """Batch FAX loss and its breakdown.

    The intersection and its sigmoid are taken per sample and only then
    averaged over the batch. With ``f_red`` missing the intersection terms
    are reported as NaN and ``lam`` must be 0.
    """
    check_fraction(lam, "lambda")
    probs = torch.softmax(logits, dim=-1)
    bce = bce_loss(probs, labels).mean()
    if f_red is None:
        if lam != 0.0:
            raise InvalidParameterError("a fixation vector is required when lambda > 0")
        total = fax_loss(bce, 0.0, 0.0)
        nan = math.nan
        return total, LossBreakdown(float(bce.detach()), nan, nan, float(total.detach()), 0.0)
    inter = intersection(reduce_attention(attention, reduction), f_red)
    l_int = intersection_loss(inter).mean()
    total = fax_loss(bce, l_int, lam)
    return total, LossBreakdown(
        float(bce.detach()), float(inter.detach().mean()), float(l_int.detach()), float(total.detach()), float(lam)
    )


def write_breakdowns(path, breakdowns):
    with open(path, "w") as fh:
        for step, bd in enumerate(breakdowns):
            fh.write(json.dumps(bd.to_record(step)) + "\n")


def _lookup(model, name):
    obj = model
    for part in name.split("."):
        obj = getattr(obj, part)
    return obj


def _parameter_groups(model):
    """Parameter names grouped by role, used to spread the sampled coordinates."""
    groups = {"query_key": [], "value": [], "embedding": [], "head": [], "other": []}
    for name, _ in model.named_parameters():
        if ".attn.query." in name or ".attn.key." in name:
            groups["query_key"].append(name)
        elif ".attn.value." in name:
            groups["value"].append(name)
        elif name.startswith(("patch_embed", "pos_embed", "cls_token")):
            groups["embedding"].append(name)
        elif name.startswith("head"):
            groups["head"].append(name)
        else:
            groups["other"].append(name)
    return groups


def fax_backward_check(model, batch, lam, n_params=200, step=1e-5, seed=0, return_details=False):
    """Max relative error between autograd and central differences of the FAX loss.

    ``batch`` is ``(images, labels, f_red)``. The model is moved to float64.
    Coordinates are drawn evenly from query/key projections, value
    projections, embeddings and the head, plus the remaining weights; the
    error uses ``max(|g|, 1e-8)`` as denominator.
    """
    images, labels, f_red = batch
    model = model.double()
    model.eval()
    images = torch.as_tensor(images, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    f_red = torch.as_tensor(f_red, dtype=torch.float64)

    def loss_value():
        logits, attention = model(images)
        return fax_objective(logits, attention, labels, f_red, lam)[0]

    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(seed)
    groups = {k: v for k, v in _parameter_groups(model).items() if v}
    per_group = int(math.ceil(n_params / len(groups)))
    picks = []
    for group, names in groups.items():
        sizes = np.array([_lookup(model, n).numel() for n in names])
        flat = rng.choice(sizes.sum(), size=min(per_group, sizes.sum()), replace=False)
        bounds = np.cumsum(sizes)
        for f in flat:
            i = int(np.searchsorted(bounds, f, side="right"))
            offset = int(f - (bounds[i - 1] if i else 0))
            picks.append((group, names[i], offset))

    errors, details = [], []
    with torch.no_grad():
        for group, name, offset in picks:
            param = _lookup(model, name)
            flat = param.view(-1)
            analytic = float(param.grad.view(-1)[offset])
            original = float(flat[offset])
            flat[offset] = original + step
            plus = float(loss_value())
            flat[offset] = original - step
            minus = float(loss_value())
            flat[offset] = original
            numeric = (plus - minus) / (2 * step)
            err = abs(analytic - numeric) / max(abs(analytic), 1e-8)
            errors.append(err)
            details.append({"group": group, "name": name, "offset": offset,
                            "analytic": analytic, "numeric": numeric, "error": err})
    worst = max(errors)
    return (worst, details) if return_details else worst
