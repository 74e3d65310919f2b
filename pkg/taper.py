"""
Taper - Tasso di Rastremazione
==============================
Regressione lineare del logaritmo naturale dell'area contro l'ascissa
curvilinea: log(y) = T * x + log(A). La pendenza T (mm^-1) è il tasso
di rastremazione; l'errore standard di stima usa N al denominatore:

    s = sqrt( sum (Y_i - y_i)^2 / N )

Supporta l'esclusione di intervalli (es. regioni di biforcazione).

Uso:
    from taper import taper_rate, exclude_intervals

    result = taper_rate(exclude_intervals(profile, [(10.0, 20.0)]))
    print(result.T, result.s_err)
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Any, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import linregress

from lumen import LumenProfile

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

MIN_STATIONS = 3

RESULT_COLUMNS = ['airway_id', 'T_per_mm', 'logA', 's_err', 'N']


class TaperError(ValueError):
    """Profilo insufficiente per la regressione."""


@dataclass
class TaperResult:
    airway_id: str
    T: float
    logA: float
    s_err: float
    N: int
    fitted: np.ndarray

    def to_row(self) -> Dict[str, Any]:
        return {
            'airway_id': self.airway_id,
            'T_per_mm': self.T,
            'logA': self.logA,
            's_err': self.s_err,
            'N': self.N,
        }


# =============================================================================
# CALCOLO
# =============================================================================

def taper_rate(p: LumenProfile) -> TaperResult:
    """
    Taper per minimi quadrati sulle stazioni non mancanti.

    Args:
        p: profilo area/ascissa di una via aerea

    Returns:
        TaperResult con T, log A, errore standard di stima, N e valori stimati Y_i
    """
    valid = p.valid
    x = np.asarray(p.arclength, dtype=float)[valid]
    y = np.asarray(p.area, dtype=float)[valid]
    n = len(x)
    if n < MIN_STATIONS:
        raise TaperError(f"{p.airway_id}: servono almeno {MIN_STATIONS} stazioni, disponibili {n}")
    if np.any(y <= 0):
        raise TaperError(f"{p.airway_id}: area non positiva in {int(np.sum(y <= 0))} stazioni")
    if np.ptp(x) == 0:
        raise TaperError(f"{p.airway_id}: tutte le stazioni alla stessa ascissa")

    log_y = np.log(y)
    fit = linregress(x, log_y)
    fitted = fit.intercept + fit.slope * x
    s_err = float(np.sqrt(np.sum((fitted - log_y) ** 2) / n))
    return TaperResult(
        airway_id=p.airway_id,
        T=float(fit.slope),
        logA=float(fit.intercept),
        s_err=s_err,
        N=n,
        fitted=fitted,
    )


def exclude_intervals(p: LumenProfile, intervals: Sequence[Tuple[float, float]]) -> LumenProfile:
    """
    Segna come mancanti le stazioni con ascissa dentro uno degli intervalli.

    Un intervallo fuori dal range del profilo genera un warning, non un errore.
    """
    if not intervals:
        return p
    x = np.asarray(p.arclength, dtype=float)
    x_lo, x_hi = (float(x.min()), float(x.max())) if len(x) else (0.0, 0.0)
    drop = np.zeros(len(x), dtype=bool)
    for lo, hi in intervals:
        lo, hi = sorted((float(lo), float(hi)))
        if hi < x_lo or lo > x_hi:
            logger.warning("%s: intervallo [%.2f, %.2f] mm fuori dal profilo [%.2f, %.2f] mm",
                           p.airway_id, lo, hi, x_lo, x_hi)
        drop |= (x >= lo) & (x <= hi)
    return p.without(drop, 'excluded')


def results_frame(results: List[TaperResult]) -> pd.DataFrame:
    """Tabella dei risultati: airway_id, T_per_mm, logA, s_err, N."""
    return pd.DataFrame([r.to_row() for r in results], columns=RESULT_COLUMNS)
