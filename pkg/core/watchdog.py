"""
Loss Watchdog - Monitors training health
Each heartbeat carries the step loss; a non-finite loss aborts the run,
and a run that never improves is flagged for the provenance record.
"""
import logging
import math

import numpy as np

from core.errors import NumericFault

logger = logging.getLogger(__name__)


class LossWatchdog:
    """
    Watches one training loop.
    heartbeat() raises NumericFault on NaN/Inf and tracks the best loss.
    """

    def __init__(self, run_name, window=20, min_improvement=1e-6):
        self.run_name = run_name
        self.window = window
        self.min_improvement = min_improvement
        self.history = []
        self.best_loss = math.inf
        self.best_step = -1

        logger.info(f"{run_name}: Watchdog armed (moving-average window: {window})")

    def heartbeat(self, step, loss):
        """Record loss for step; raise on divergence"""
        if not math.isfinite(loss):
            recent = ", ".join(f"{x:.4f}" for x in self.history[-5:])
            logger.error(f"{self.run_name}: Watchdog tripped at step {step}: loss={loss} "
                         f"(last losses: {recent})")
            raise NumericFault(f"{self.run_name}: loss became {loss} at step {step}")
        self.history.append(float(loss))
        if loss < self.best_loss - self.min_improvement:
            self.best_loss = float(loss)
            self.best_step = step

    @property
    def initial_loss(self):
        return self.history[0] if self.history else math.nan

    @property
    def final_loss(self):
        return self.history[-1] if self.history else math.nan

    def moving_average(self):
        if not self.history:
            return np.array([])
        width = max(1, min(self.window, len(self.history)))
        kernel = np.ones(width) / width
        return np.convolve(np.asarray(self.history), kernel, mode="valid")

    def improved(self):
        """True when the best loss beats the first recorded loss"""
        return bool(self.history) and self.best_loss < self.history[0] - self.min_improvement

    def trend_decreasing(self):
        avg = self.moving_average()
        return len(avg) >= 2 and avg[-1] < avg[0]

    def plateaued_above(self, baseline, tolerance=1e-3):
        """Final loss did not get meaningfully below a reference loss"""
        return self.final_loss >= baseline - tolerance

    def summary(self):
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "best_loss": self.best_loss,
            "best_step": self.best_step,
            "improved": self.improved(),
            "steps": len(self.history),
        }
