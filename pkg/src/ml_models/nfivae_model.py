"""Non-factorized identifiable VAE conditioned on subject index.

The conditional prior is a general exponential family

    log p(s | j) = log Q(s) + T(s)^T lambda(j) - log C(j)

with Q the standard normal base measure, T(s) = [T_f(s), T_NN(s)] where
T_f stacks [s_d, s_d^2] per latent dimension and T_NN is a ReLU network, and
lambda(j) one row of a learned table per subject. The unnormalized prior is
fitted by score matching; encoder and decoder by the ELBO with the prior
held fixed.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.preprocessing import StandardScaler
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

from common.errors import DataError, DimensionMismatch, NonFiniteLoss, NoProgress
from common.seeding import derive_seed

LOGGER = logging.getLogger(__name__)

DTYPE = torch.float64
LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
LOG_2PI = math.log(2.0 * math.pi)
MAX_HIDDEN_LAYERS = 3
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["epoch", "elbo", "score_matching", "total"]

Batch = Tuple[torch.Tensor, torch.Tensor]


class NfIvaeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(default=2, ge=1)
    encoder_widths: List[int] = Field(default_factory=lambda: [32, 32])
    decoder_widths: List[int] = Field(default_factory=lambda: [32, 32])
    tnn_widths: List[int] = Field(default_factory=lambda: [16])
    tnn_dim: int = Field(default=2, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    epochs: int = Field(default=60, ge=0)
    batch_size: int = Field(default=256, ge=1)
    seed: int = 0
    score_match_weight: float = Field(default=1.0, gt=0)
    factorized_prior: bool = False

    @field_validator("encoder_widths", "decoder_widths", "tnn_widths")
    @classmethod
    def _check_widths(cls, widths: List[int]) -> List[int]:
        if len(widths) > MAX_HIDDEN_LAYERS:
            raise ValueError(f"at most {MAX_HIDDEN_LAYERS} hidden layers, got {len(widths)}")
        if any(width < 1 for width in widths):
            raise ValueError("layer widths must be at least 1")
        return widths


def _mlp(in_dim: int, widths: List[int], out_dim: int,
         activation: Callable[[], nn.Module]) -> nn.Sequential:
    layers: List[nn.Module] = []
    prev = in_dim
    for width in widths:
        layers += [nn.Linear(prev, width), activation()]
        prev = width
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class NfIvae(nn.Module):
    def __init__(self, data_dim: int, n_subjects: int, cfg: NfIvaeConfig):
        super().__init__()
        self.cfg = cfg
        self.data_dim = data_dim
        self.n_subjects = n_subjects
        self.latent_dim = cfg.latent_dim
        self.tnn_dim = cfg.tnn_dim

        self.encoder = _mlp(data_dim + n_subjects, cfg.encoder_widths, 2 * cfg.latent_dim,
                            lambda: nn.LeakyReLU(0.2))
        self.decoder = _mlp(cfg.latent_dim, cfg.decoder_widths, 2 * data_dim,
                            lambda: nn.LeakyReLU(0.2))
        # T_NN must use plain ReLU
        self.t_nn = _mlp(cfg.latent_dim, cfg.tnn_widths, cfg.tnn_dim, nn.ReLU)
        self.lambda_f = nn.Parameter(torch.zeros(n_subjects, cfg.latent_dim, 2))
        self.lambda_nn = nn.Parameter(torch.zeros(n_subjects, cfg.tnn_dim))
        self.register_buffer("scaler_mean", torch.zeros(data_dim))
        self.register_buffer("scaler_scale", torch.ones(data_dim))
        self.to(DTYPE)

        if cfg.factorized_prior:
            # factorized-prior (plain iVAE) variant: T_NN contributes nothing
            with torch.no_grad():
                for param in self.t_nn.parameters():
                    param.zero_()
                self.lambda_nn.zero_()
            for param in list(self.t_nn.parameters()) + [self.lambda_nn]:
                param.requires_grad_(False)

    @property
    def t_dim(self) -> int:
        return 2 * self.latent_dim + self.tnn_dim

    def prior_parameters(self) -> List[nn.Parameter]:
        return [self.lambda_f, self.lambda_nn] + list(self.t_nn.parameters())

    def _one_hot(self, j: torch.Tensor) -> torch.Tensor:
        return F.one_hot(j, self.n_subjects).to(DTYPE)

    def encode(self, x: torch.Tensor, j: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder(torch.cat([x, self._one_hot(j)], dim=-1))
        mean, logvar = out.chunk(2, dim=-1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def decode(self, s: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.decoder(s).chunk(2, dim=-1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def sufficient_statistics(self, s: torch.Tensor, detach: bool = False) -> torch.Tensor:
        t_f = torch.stack([s, s ** 2], dim=-1).flatten(start_dim=-2)
        if detach:
            params = {name: p.detach() for name, p in self.t_nn.named_parameters()}
            t_nn = functional_call(self.t_nn, params, (s,))
        else:
            t_nn = self.t_nn(s)
        return torch.cat([t_f, t_nn], dim=-1)

    def natural_parameters(self, j: torch.Tensor, detach: bool = False) -> torch.Tensor:
        lam = torch.cat([self.lambda_f[j].flatten(start_dim=-2), self.lambda_nn[j]], dim=-1)
        return lam.detach() if detach else lam

    def prior_log_density_unnormalized(self, s: torch.Tensor, j: torch.Tensor,
                                       detach_prior: bool = False) -> torch.Tensor:
        log_base = -0.5 * (s ** 2).sum(-1) - 0.5 * self.latent_dim * LOG_2PI
        stats = self.sufficient_statistics(s, detach=detach_prior)
        return log_base + (stats * self.natural_parameters(j, detach=detach_prior)).sum(-1)


def _as_tensor(values, dtype=DTYPE) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def prior_log_density_unnormalized(s, j, model: NfIvae) -> torch.Tensor:
    """log Q(s) + T(s)^T lambda(j); scalar for a single latent vector"""
    s_t = _as_tensor(s)
    j_t = torch.as_tensor(j, dtype=torch.long)
    if s_t.dim() == 1:
        return model.prior_log_density_unnormalized(s_t.unsqueeze(0), j_t.reshape(1))[0]
    return model.prior_log_density_unnormalized(s_t, j_t)


class ElboTerms(NamedTuple):
    reconstruction: torch.Tensor
    prior: torch.Tensor
    entropy: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.reconstruction + self.prior + self.entropy


def _gaussian_log_likelihood(x: torch.Tensor, mean: torch.Tensor,
                             logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * (LOG_2PI + logvar + (x - mean) ** 2 / logvar.exp()).sum(-1)


def elbo_terms(batch: Batch, model: NfIvae, seed: int, deterministic: bool = False) -> ElboTerms:
    """Batch-mean ELBO terms with one reparameterized sample per row.

    The prior enters with its parameters detached; fitting it is the job of
    the score-matching loss. ``deterministic`` decodes the posterior mean.
    """
    x, j = batch
    if x.shape[0] == 0:
        raise DataError("elbo needs a nonempty batch")
    mean, logvar = model.encode(x, j)
    if deterministic:
        noise = torch.zeros_like(mean)
    else:
        generator = torch.Generator().manual_seed(seed)
        noise = torch.randn(mean.shape, generator=generator, dtype=DTYPE)
    s = mean + (0.5 * logvar).exp() * noise

    dec_mean, dec_logvar = model.decode(s)
    reconstruction = _gaussian_log_likelihood(x, dec_mean, dec_logvar)
    prior = model.prior_log_density_unnormalized(s, j, detach_prior=True)
    log_q = -0.5 * (LOG_2PI + logvar + noise ** 2).sum(-1)
    return ElboTerms(reconstruction.mean(), prior.mean(), (-log_q).mean())


def elbo(batch: Batch, model: NfIvae, seed: int) -> torch.Tensor:
    value = elbo_terms(batch, model, seed).total
    if not torch.isfinite(value):
        raise NonFiniteLoss("ELBO is not finite", diagnostics={"elbo": float(value)})
    return value


def score_matching_objective(s: torch.Tensor, j: torch.Tensor, model: NfIvae) -> torch.Tensor:
    """Batch mean of sum_d [d2/ds_d2 log p + 0.5 (d/ds_d log p)^2] with exact derivatives"""
    s = s.detach().clone().requires_grad_(True)
    log_p = model.prior_log_density_unnormalized(s, j)
    grad = torch.autograd.grad(log_p.sum(), s, create_graph=True)[0]
    laplacian = torch.zeros(s.shape[0], dtype=DTYPE)
    for d in range(s.shape[1]):
        second = torch.autograd.grad(grad[:, d].sum(), s, create_graph=True, allow_unused=True)[0]
        if second is not None:
            laplacian = laplacian + second[:, d]
    return (laplacian + 0.5 * (grad ** 2).sum(-1)).mean()


def score_matching_loss(batch: Batch, model: NfIvae, seed: int) -> torch.Tensor:
    x, j = batch
    with torch.no_grad():
        mean, logvar = model.encode(x, j)
        generator = torch.Generator().manual_seed(seed)
        s = mean + (0.5 * logvar).exp() * torch.randn(mean.shape, generator=generator, dtype=DTYPE)
    value = score_matching_objective(s, j, model)
    if not torch.isfinite(value):
        raise NonFiniteLoss("score-matching loss is not finite",
                            diagnostics={"score_matching": float(value)})
    return value


@dataclass
class LatentEstimate:
    values: np.ndarray
    subject_index: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.values, columns=[f"latent_{d}" for d in range(self.values.shape[1])]
        )
        frame.insert(0, "subject", self.subject_index)
        return frame


@dataclass
class TrainingResult:
    model: NfIvae
    log: pd.DataFrame
    diagnostics: dict = field(default_factory=dict)


def _identifiability(model: NfIvae) -> dict:
    """Rank of [lambda(j) - lambda(0)]; full rank k needs k + 1 distinct subjects"""
    lam = model.natural_parameters(torch.arange(model.n_subjects)).detach().numpy()
    diffs = lam[1:] - lam[0]
    rank = int(np.linalg.matrix_rank(diffs)) if diffs.size else 0
    return {
        "t_dim": model.t_dim,
        "required_subjects": model.t_dim + 1,
        "n_subjects": model.n_subjects,
        "lambda_difference_rank": rank,
        "assumption_met": rank == model.t_dim,
    }


def build_model(data_dim: int, n_subjects: int, cfg: NfIvaeConfig) -> NfIvae:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return NfIvae(data_dim, n_subjects, cfg)


def train_nfivae(x: np.ndarray, subject_index: np.ndarray, cfg: NfIvaeConfig,
                 n_subjects: Optional[int] = None) -> TrainingResult:
    x = np.asarray(x, dtype=float)
    subject_index = np.asarray(subject_index, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != subject_index.shape[0] or x.shape[0] == 0:
        raise DimensionMismatch(f"expected (rows, nodes) data with one subject per row, got {x.shape}")
    n_subjects = int(n_subjects or subject_index.max() + 1)
    model = build_model(x.shape[1], n_subjects, cfg)

    if cfg.latent_dim > x.shape[1]:
        LOGGER.warning(
            "More latents than observed nodes",
            extra={"stage": "nfivae", "latent_dim": cfg.latent_dim, "nodes": x.shape[1]},
        )
    if n_subjects < model.t_dim + 1:
        LOGGER.warning(
            "Too few subjects for the identifiability assumption",
            extra={"stage": "nfivae", "subjects": n_subjects, "required": model.t_dim + 1},
        )

    scaler = StandardScaler().fit(x)
    with torch.no_grad():
        model.scaler_mean.copy_(torch.as_tensor(scaler.mean_, dtype=DTYPE))
        model.scaler_scale.copy_(torch.as_tensor(scaler.scale_, dtype=DTYPE))
    x_t = torch.as_tensor(scaler.transform(x), dtype=DTYPE)
    j_t = torch.as_tensor(subject_index, dtype=torch.long)

    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                 lr=cfg.learning_rate)
    patience = math.ceil(0.2 * cfg.epochs)
    rows = []
    n = x_t.shape[0]
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for epoch in range(cfg.epochs):
            shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, "shuffle", epoch))
            order = torch.randperm(n, generator=shuffle)
            sums = np.zeros(3)
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                batch = (x_t[idx], j_t[idx])
                elbo_value = elbo_terms(batch, model, derive_seed(cfg.seed, "elbo", epoch, b)).total
                sm_value = score_matching_loss(batch, model, derive_seed(cfg.seed, "sm", epoch, b))
                total = -elbo_value + cfg.score_match_weight * sm_value
                if not torch.isfinite(total):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch + 1}, batch {b}",
                        diagnostics={"epoch": epoch + 1, "batch": b, "elbo": float(elbo_value),
                                     "score_matching": float(sm_value)},
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                sums += len(idx) * np.array(
                    [elbo_value.item(), sm_value.item(), total.item()]
                )
            rows.append([epoch + 1, *(sums / n)])
            LOGGER.debug(
                "Epoch done",
                extra={"stage": "nfivae", "epoch": epoch + 1, "total": round(rows[-1][3], 6)},
            )
            if cfg.epochs >= 5 and epoch == patience:
                totals = [row[3] for row in rows]
                if min(totals[1:]) >= totals[0]:
                    raise NoProgress(
                        f"loss did not improve on {totals[0]:.4f} within {patience} epochs"
                    )
    finally:
        torch.set_num_threads(threads)

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    log["epoch"] = log["epoch"].astype(int)
    diagnostics = _identifiability(model)
    LOGGER.info(
        "NF-iVAE trained",
        extra={"stage": "nfivae", "epochs": cfg.epochs, "seed": cfg.seed,
               "lambda_rank": diagnostics["lambda_difference_rank"], "t_dim": model.t_dim},
    )
    return TrainingResult(model=model, log=log, diagnostics=diagnostics)


def infer_latents(model: NfIvae, x: np.ndarray, subject_index: np.ndarray) -> LatentEstimate:
    """Posterior mean of q(s | x, j) per row"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    subject_index = np.atleast_1d(np.asarray(subject_index, dtype=np.int64))
    if x.shape[1] != model.data_dim:
        raise DimensionMismatch(f"model expects {model.data_dim} nodes, got {x.shape[1]}")
    if x.shape[0] != subject_index.shape[0]:
        raise DimensionMismatch("one subject index per row is required")
    if subject_index.size and (subject_index.min() < 0 or subject_index.max() >= model.n_subjects):
        raise DimensionMismatch(f"subject index outside [0, {model.n_subjects})")
    with torch.no_grad():
        x_t = (torch.as_tensor(x, dtype=DTYPE) - model.scaler_mean) / model.scaler_scale
        mean, _ = model.encode(x_t, torch.as_tensor(subject_index, dtype=torch.long))
    return LatentEstimate(values=mean.numpy().copy(), subject_index=subject_index.copy())


def save_checkpoint(model: NfIvae, path: Union[str, Path]) -> None:
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "header": np.array(json.dumps({
            "data_dim": model.data_dim,
            "n_subjects": model.n_subjects,
            "config": model.cfg.model_dump(),
        }, sort_keys=True)),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"shape:{name}"] = np.array(tensor.shape, dtype=np.int64)
        arrays[f"param:{name}"] = tensor.detach().numpy().ravel()
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)


def load_checkpoint(path: Union[str, Path]) -> NfIvae:
    with np.load(path) as archive:
        version = int(archive["format_version"])
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(str(archive["header"]))
        model = NfIvae(header["data_dim"], header["n_subjects"], NfIvaeConfig(**header["config"]))
        state = {}
        for key in archive.files:
            if key.startswith("param:"):
                name = key[len("param:"):]
                shape = tuple(int(v) for v in archive[f"shape:{name}"])
                state[name] = torch.as_tensor(archive[key].reshape(shape), dtype=DTYPE)
    model.load_state_dict(state)
    return model
