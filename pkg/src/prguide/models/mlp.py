"""Small MLP noise predictor trained with the standard denoising objective."""
import copy
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from prguide.exceptions import ParameterError, ShapeError
from prguide.models.base import NoisePredictor
from prguide.models.conditions import Condition
from prguide.schedule import make_schedule
from prguide.utils.validation import check_grids

__all__ = ["MlpDenoiser", "mlp_epsilon", "train_denoiser", "finetune_subject", "denoising_loss"]

ACTIVATIONS = {"relu": torch.nn.ReLU, "silu": torch.nn.SiLU, "tanh": torch.nn.Tanh}
PREDICTIONS = ("epsilon", "v")


def timestep_embedding(frac, dim):
    """Sinusoidal embedding of ``frac = t / T`` (array) into ``dim`` features."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    arg = 1000.0 * np.asarray(frac, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class _Network(torch.nn.Module):
    def __init__(self, n_in, n_out, hidden, activation, n_labels, n_subjects, label_dim):
        super().__init__()
        # Last row of each table is the "absent" token.
        self.label_embed = torch.nn.Embedding(n_labels + 1, label_dim, dtype=torch.float64)
        self.subject_embed = torch.nn.Embedding(n_subjects + 1, label_dim, dtype=torch.float64)
        layers = []
        width = n_in + 2 * label_dim
        for h in hidden:
            layers += [torch.nn.Linear(width, h, dtype=torch.float64), ACTIVATIONS[activation]()]
            width = h
        layers.append(torch.nn.Linear(width, n_out, dtype=torch.float64))
        self.body = torch.nn.Sequential(*layers)

    def forward(self, x, temb, label_idx, subject_idx):
        h = torch.cat([x, temb, self.label_embed(label_idx), self.subject_embed(subject_idx)], dim=-1)
        return self.body(h)


class MlpDenoiser(BaseEstimator, NoisePredictor):
    """Conditional MLP that predicts the noise added to a latent.

    Inputs are the flattened noisy latent, a sinusoidal timestep embedding
    and learned label / subject embeddings.  Training draws a fresh batch,
    timestep and noise every step; conditions are dropped to unconditional
    with probability ``p_uncond`` so one network serves both branches of
    classifier-free guidance.

    The returned quantity is always the noise estimate.  With
    ``prediction="v"`` the raw network output ``F`` is read as a velocity and
    converted, ``eps = sqrt(a) F + sqrt(1 - a) x_t``; this keeps the implied
    clean estimate bounded at the noisiest steps, where ``1 / sqrt(a)``
    would otherwise amplify small errors.  Training then regresses ``F`` on
    ``v = sqrt(a) eps - sqrt(1 - a) x_0``; the noise MSE would weight those
    steps by ``a`` and leave them untrained.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default=(128, 128)
    activation : {"silu", "relu", "tanh"}, default="silu"
    prediction : {"epsilon", "v"}, default="epsilon"
    time_embed_dim : int, default=16
    label_embed_dim : int, default=8
    n_labels : int, optional
        Number of prompt labels; inferred from the training conditions.
    n_subjects : int, default=1
        Number of subject tokens reserved for later fine-tuning.
    learning_rate : float, default=1e-3
    n_steps : int, default=2000
    batch_size : int, default=128
    p_uncond : float, default=0.1
    random_state : int, default=0
    """

    def __init__(
        self,
        hidden_layer_sizes=(128, 128),
        activation="silu",
        prediction="epsilon",
        time_embed_dim=16,
        label_embed_dim=8,
        n_labels=None,
        n_subjects=1,
        learning_rate=1e-3,
        n_steps=2000,
        batch_size=128,
        p_uncond=0.1,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.prediction = prediction
        self.time_embed_dim = time_embed_dim
        self.label_embed_dim = label_embed_dim
        self.n_labels = n_labels
        self.n_subjects = n_subjects
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.p_uncond = p_uncond
        self.random_state = random_state

    # -- construction ---------------------------------------------------------

    def _build(self, grid_shape, n_labels):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.prediction not in PREDICTIONS:
            raise ParameterError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be an even integer >= 2")
        c, w, h = grid_shape
        d = c * w * h
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.network_ = _Network(
                d + self.time_embed_dim,
                d,
                tuple(self.hidden_layer_sizes),
                self.activation,
                n_labels,
                self.n_subjects,
                self.label_embed_dim,
            )
        self.grid_shape_ = tuple(grid_shape)
        self.n_labels_ = n_labels
        return self

    @property
    def grid_shape(self):
        check_is_fitted(self, "network_")
        return self.grid_shape_

    # -- evaluation -----------------------------------------------------------

    def _cond_indices(self, conds):
        labels = np.array([self.n_labels_ if c.label is None else c.label for c in conds])
        subjects = np.array([self.n_subjects if c.subject is None else c.subject for c in conds])
        if np.any(labels > self.n_labels_) or np.any(subjects > self.n_subjects):
            raise ParameterError("condition refers to a label or subject the network does not know")
        return torch.as_tensor(labels), torch.as_tensor(subjects)

    def _raw(self, x, frac, labels, subjects):
        temb = torch.as_tensor(timestep_embedding(frac, self.time_embed_dim))
        return self.network_(x, temb, labels, subjects)

    def _forward(self, x_flat, frac, alpha_bar, labels, subjects):
        x = torch.as_tensor(np.array(x_flat, dtype=np.float64))
        out = self._raw(x, frac, labels, subjects)
        if self.prediction == "v":
            ab = torch.as_tensor(np.full(x.shape[0], alpha_bar, dtype=np.float64))[:, None]
            out = torch.sqrt(ab) * out + torch.sqrt(1.0 - ab) * x
        return out

    def epsilon_arrays(self, x, t, cond, schedule):
        check_is_fitted(self, "network_")
        self._check_input(x)
        lead = x.shape[:-3]
        flat = x.reshape(-1, x.shape[-3] * x.shape[-2] * x.shape[-1])
        n = flat.shape[0]
        labels, subjects = self._cond_indices([cond])
        frac = np.full(n, t / schedule.T)
        with torch.no_grad():
            out = self._forward(flat, frac, schedule.alpha_bar[t], labels.expand(n), subjects.expand(n))
        return out.numpy().reshape(*lead, *x.shape[-3:])

    # -- training -------------------------------------------------------------

    def _train(self, data, conds, schedule, n_steps, learning_rate, batch_size, p_uncond, seed):
        rng = np.random.default_rng(seed)
        opt = torch.optim.Adam(self.network_.parameters(), lr=learning_rate)
        labels, subjects = self._cond_indices(conds)
        ab = schedule.alpha_bar
        losses = []
        for _ in range(n_steps):
            pick = rng.integers(0, data.shape[0], size=batch_size)
            t = rng.integers(1, schedule.T + 1, size=batch_size)
            noise = rng.standard_normal((batch_size, data.shape[1]))
            drop = torch.as_tensor(rng.random(batch_size) < p_uncond)
            x_t = np.sqrt(ab[t])[:, None] * data[pick] + np.sqrt(1 - ab[t])[:, None] * noise
            lab = torch.where(drop, self.n_labels_, labels[pick])
            sub = torch.where(drop, self.n_subjects, subjects[pick])
            if self.prediction == "v":
                target = np.sqrt(ab[t])[:, None] * noise - np.sqrt(1 - ab[t])[:, None] * data[pick]
                pred = self._raw(torch.as_tensor(x_t), t / schedule.T, lab, sub)
            else:
                target = noise
                pred = self._forward(x_t, t / schedule.T, ab[t], lab, sub)
            loss = torch.mean((pred - torch.as_tensor(target)) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    def fit(self, X, y, schedule=None):
        """Train on latents ``X`` with conditions ``y``.

        Parameters
        ----------
        X : sequence of LatentGrid
        y : sequence of Condition
        schedule : NoiseSchedule, optional
            Forward process used to noise the data; cosine with 50 steps
            by default.

        Returns
        -------
        self : MlpDenoiser
        """
        data, shape = check_grids(X, name="X")
        conds = list(y)
        if len(conds) != data.shape[0]:
            raise ParameterError("X and y must have the same length")
        if schedule is None:
            schedule = make_schedule(50)
        n_labels = self.n_labels
        if n_labels is None:
            n_labels = 1 + max((c.label for c in conds if c.label is not None), default=0)
        self._build(shape, n_labels)
        self.loss_curve_ = self._train(
            data, conds, schedule, self.n_steps, self.learning_rate,
            self.batch_size, self.p_uncond, self.random_state,
        )
        return self

    def predict(self, X, t, cond, schedule):
        """Noise predictions for a sequence of latents at a common timestep."""
        data, shape = check_grids(X, name="X")
        c, w, h = shape
        out = self.epsilon_arrays(data.reshape(-1, w, h, c), t, cond, schedule)
        return out.reshape(data.shape)

    def weights(self):
        """All parameters as one flat float64 vector, in a fixed order."""
        check_is_fitted(self, "network_")
        return np.concatenate([p.detach().numpy().ravel() for p in self.network_.state_dict().values()])


def mlp_epsilon(model, x_t, t, cond, schedule):
    """Deterministic forward pass of ``model`` on one latent."""
    return model.predict_epsilon(x_t, t, cond, schedule)


def train_denoiser(dataset, schedule, **hyperparams):
    """Train an :class:`MlpDenoiser` on ``(LatentGrid, Condition)`` pairs."""
    dataset = list(dataset)
    if not dataset:
        raise ParameterError("training dataset is empty")
    grids, conds = zip(*dataset)
    return MlpDenoiser(**hyperparams).fit(list(grids), list(conds), schedule=schedule)


def finetune_subject(
    base,
    references,
    subject,
    schedule,
    label=0,
    n_steps=300,
    learning_rate=5e-4,
    batch_size=64,
    p_uncond=0.0,
    random_state=0,
):
    """Fine-tune a copy of ``base`` on a few subject references.

    References are paired with ``SubjectPrompt(label, subject)``.  ``base``
    itself is left untouched.  Returns the personalized copy with its own
    ``loss_curve_``.
    """
    check_is_fitted(base, "network_")
    references = list(references)
    if not references:
        raise ParameterError("fine-tuning needs at least one reference latent")
    if len(references) > 10:
        raise ParameterError("fine-tuning expects at most 10 references")
    data, shape = check_grids(references, name="references")
    if shape != base.grid_shape_:
        raise ShapeError(f"reference shape {shape} does not match model shape {base.grid_shape_}")
    if not (0 <= subject < base.n_subjects):
        raise ParameterError(f"subject {subject} outside the {base.n_subjects} reserved subject slots")
    theta = copy.deepcopy(base)
    conds = [Condition.subject_prompt(label, subject)] * len(references)
    theta.loss_curve_ = theta._train(
        data, conds, schedule, n_steps, learning_rate, batch_size, p_uncond, random_state
    )
    return theta


def denoising_loss(model, X, conds, schedule, n_draws=16, seed=12345):
    """Mean squared noise-prediction error with fixed, seeded noise draws."""
    data, shape = check_grids(X, name="X")
    c, w, h = shape
    rng = np.random.default_rng(seed)
    ab = schedule.alpha_bar
    conds = list(conds)
    total = 0.0
    for _ in range(n_draws):
        t = rng.integers(1, schedule.T + 1, size=data.shape[0])
        noise = rng.standard_normal(data.shape)
        x_t = np.sqrt(ab[t])[:, None] * data + np.sqrt(1 - ab[t])[:, None] * noise
        for i in range(data.shape[0]):
            pred = model.epsilon_arrays(x_t[i].reshape(w, h, c), int(t[i]), conds[i], schedule)
            total += np.mean((pred.ravel() - noise[i]) ** 2)
    return total / (n_draws * data.shape[0])
