use serde::Serialize;

/// Probabilities of necessary, sufficient, and necessary-and-sufficient
/// causation for one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CausationTriple {
    pub pn: f64,
    pub ps: f64,
    pub pns: f64,
}

/// PN, PS and PNS from the factual event probability `p` and the
/// counterfactual one `p̄`, assuming exogeneity and monotonicity:
///
/// ```text
/// PN  = max(1 − p̄/p, 0)          (0 when p = 0)
/// PS  = max(1 − (1−p)/(1−p̄), 0)  (0 when p̄ = 1)
/// PNS = max(p − p̄, 0)
/// ```
pub fn causation_probs(p: f64, p_bar: f64) -> CausationTriple {
    let diff = p - p_bar;
    // Divided forms of the same expressions; they keep PNS ≤ min(PN, PS)
    // exact in floating point since both denominators are ≤ 1.
    let pn = if p > 0.0 { (diff / p).clamp(0.0, 1.0) } else { 0.0 };
    let ps = if p_bar < 1.0 {
        (diff / (1.0 - p_bar)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    CausationTriple {
        pn,
        ps,
        pns: diff.clamp(0.0, 1.0),
    }
}
