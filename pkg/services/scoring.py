from typing import Any, Dict, List

import numpy as np

from utils.logger import get_logger

logger = get_logger(__name__)


class VerdictEngine:
    """Turns Hill-curve and probability-plot statistics into a tail verdict.

    heavy: Hill curve stabilizes and the exponential plot of the right half bends up.
    light: Hill curve drifts and the plot bends down.
    Anything else is ambiguous.

    The light rule carries one extra condition: no isolated extreme may sit above
    the rest (top normalized spacing below `top_spacing_ratio`). Without it a light
    body with a few power-law outliers reads as light instead of ambiguous.
    """

    def __init__(self):
        # Thresholds for the tests
        self.thresholds = {
            "stabilization_rel_change": 0.10,
            "curvature_deadband": 0.05,
            "top_spacing_ratio": 6.0,
        }

    def stabilization(self, k: List[int], estimates: List[float]) -> Dict[str, Any]:
        """Relative change between the two halves of the upper half of the k-grid."""
        order = np.argsort(k)
        values = np.asarray(estimates, dtype=float)[order]
        top = values[len(values) // 2 :]
        if top.size < 2:
            return {"rel_change": float("inf"), "stabilized": False}
        split = top.size // 2
        first, second = np.median(top[:split]), np.median(top[split:])
        scale = abs(float(np.median(top)))
        rel_change = abs(first - second) / scale if scale > 0 else float("inf")
        return {
            "rel_change": float(rel_change),
            "stabilized": bool(rel_change < self.thresholds["stabilization_rel_change"]),
        }

    def curvature_sign(self, coefficient: float) -> str:
        band = self.thresholds["curvature_deadband"]
        if coefficient > band:
            return "bending_up"
        if coefficient < -band:
            return "bending_down"
        return "flat"

    def make_decision(self, stabilized: bool, curvature: str, isolated_extreme: bool) -> str:
        if stabilized and curvature == "bending_up":
            return "consistent-with-heavy"
        if not stabilized and curvature == "bending_down" and not isolated_extreme:
            return "consistent-with-light"
        return "ambiguous"

    def evaluate(self, hill_k, hill_estimates, curvature: float, top_spacing_ratio: float) -> Dict[str, Any]:
        stab = self.stabilization(hill_k, hill_estimates)
        sign = self.curvature_sign(curvature)
        isolated = not top_spacing_ratio < self.thresholds["top_spacing_ratio"]
        verdict = self.make_decision(stab["stabilized"], sign, isolated)
        trace = [
            {
                "rule": "hill_stabilization",
                "value": stab["rel_change"],
                "threshold": self.thresholds["stabilization_rel_change"],
                "outcome": "stabilized" if stab["stabilized"] else "drifting",
            },
            {
                "rule": "exp_plot_curvature",
                "value": float(curvature),
                "threshold": self.thresholds["curvature_deadband"],
                "outcome": sign,
            },
            {
                "rule": "top_spacing",
                "value": float(top_spacing_ratio),
                "threshold": self.thresholds["top_spacing_ratio"],
                "outcome": "isolated_extreme" if isolated else "regular",
            },
        ]
        logger.debug(f"tail verdict {verdict}: {[(r['rule'], r['outcome']) for r in trace]}")
        return {"verdict": verdict, "rule_trace": trace, "explanation": self.generate_explanation(verdict, trace)}

    def generate_explanation(self, verdict: str, trace: List[Dict[str, Any]]) -> str:
        parts = [f"{r['rule']}={r['outcome']} ({r['value']:.4g})" for r in trace]
        if verdict == "consistent-with-heavy":
            lead = "Hill curve is stable and the exponential plot bends up"
        elif verdict == "consistent-with-light":
            lead = "Hill curve drifts and the exponential plot bends down"
        else:
            lead = "Tests disagree or too few tail points"
        return f"{lead}: " + ", ".join(parts)


verdict_engine = VerdictEngine()
