"""Compute planning with the Hoffmann et al. loss surface.

    L(N, D) = A / N**alpha + B / D**beta + E

plus the tokens-per-parameter rule and an epoch-repetition check.
"""

from __future__ import annotations

from dataclasses import dataclass

# past this many passes over the same data, repetition stops being nearly free
MAX_CHEAP_EPOCHS = 4.0
DEFAULT_TOKENS_PER_PARAM = 20.0


@dataclass(frozen=True)
class ScalingConstants:
    A: float = 406.4
    B: float = 410.7
    E: float = 1.69
    alpha: float = 0.32
    beta: float = 0.28

    def __post_init__(self):
        if not (self.A > 0 and self.B > 0 and self.E > 0):
            raise ValueError("A, B and E must be positive")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")


CHINCHILLA = ScalingConstants()


@dataclass(frozen=True)
class PlanReport:
    n_params: int
    optimal_tokens: int
    predicted_loss: float
    epochs: float | None
    epoch_warning: bool
    estimated_flops: float
    unique_tokens: int | None = None

    def key_values(self) -> dict[str, str]:
        out = {
            "n_params": str(self.n_params),
            "optimal_tokens": str(self.optimal_tokens),
            "predicted_loss": f"{self.predicted_loss:.6f}",
            "estimated_flops": f"{self.estimated_flops:.6e}",
        }
        if self.epochs is not None:
            out["unique_tokens"] = str(self.unique_tokens)
            out["epochs"] = f"{self.epochs:.6f}"
            out["epoch_warning"] = str(self.epoch_warning).lower()
        return out

    def render(self) -> str:
        lines = [
            f"model parameters     {self.n_params:>20,}",
            f"compute-optimal data {self.optimal_tokens:>20,} tokens (optimal_tokens {compact(self.optimal_tokens)})",
            f"predicted loss       {self.predicted_loss:>20.4f} nats",
            f"training FLOPs (6ND) {self.estimated_flops:>20.3e}",
        ]
        if self.epochs is not None:
            lines.append(f"epochs over corpus   {self.epochs:>20.3f}")
            if self.epoch_warning:
                lines.append(
                    f"WARNING: more than {MAX_CHEAP_EPOCHS:g} epochs of repeated data; "
                    "returns from repetition decay quickly past this point"
                )
        lines.append("")
        lines.extend(f"{k}={v}" for k, v in self.key_values().items())
        return "\n".join(lines)


def compact(x: float) -> str:
    """3.2e9 rather than 3.2e+09."""
    text = f"{x:.3g}"
    if "e" not in text:
        return text
    mant, exp = text.split("e")
    return f"{mant}e{int(exp)}"


def predict_loss(n_params: float, n_tokens: float, constants: ScalingConstants = CHINCHILLA) -> float:
    if n_params <= 0 or n_tokens <= 0:
        raise ValueError(f"n_params and n_tokens must be positive, got {n_params}, {n_tokens}")
    c = constants
    return c.A / n_params**c.alpha + c.B / n_tokens**c.beta + c.E


def optimal_tokens(n_params: float, ratio: float = DEFAULT_TOKENS_PER_PARAM) -> int:
    if n_params <= 0 or ratio <= 0:
        raise ValueError("n_params and ratio must be positive")
    return int(round(ratio * n_params))


def epochs_required(target_tokens: float, unique_tokens: float) -> tuple[float, bool]:
    """How many passes over ``unique_tokens`` it takes to see ``target_tokens``.

    The flag is raised strictly above four epochs.
    """
    if unique_tokens <= 0 or target_tokens <= 0:
        raise ValueError("token counts must be positive")
    epochs = target_tokens / unique_tokens
    return epochs, epochs > MAX_CHEAP_EPOCHS


def training_flops(n_params: float, n_tokens: float) -> float:
    return 6.0 * n_params * n_tokens


def plan(
    n_params: float,
    unique_tokens: float | None = None,
    ratio: float = DEFAULT_TOKENS_PER_PARAM,
    constants: ScalingConstants = CHINCHILLA,
    target_tokens: float | None = None,
) -> PlanReport:
    """Size a run: optimal data, predicted loss, and repetition if the corpus is given.

    ``target_tokens`` defaults to the compute-optimal count.
    """
    tokens = optimal_tokens(n_params, ratio)
    target = tokens if target_tokens is None else target_tokens
    epochs, warn = (None, False)
    if unique_tokens is not None:
        epochs, warn = epochs_required(target, unique_tokens)
    return PlanReport(
        n_params=int(round(n_params)),
        optimal_tokens=tokens,
        predicted_loss=predict_loss(n_params, target, constants),
        epochs=epochs,
        epoch_warning=warn,
        estimated_flops=training_flops(n_params, target),
        unique_tokens=None if unique_tokens is None else int(round(unique_tokens)),
    )
