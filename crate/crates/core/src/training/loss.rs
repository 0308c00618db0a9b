use super::{LossWeights, TrainingError};
use crate::ctc::{ctc_loss, segment_boundaries, viterbi_align, LogProbLattice};
use crate::model::{Dropout, Model};
use crate::numerics::{Gradients, Graph, NodeId, NumericsError, Tensor};

/// Loss terms of one utterance and the gradient of `total`.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: f64,
    pub l_dec: f64,
    pub l_ctc1: f64,
    pub l_ctc2: f64,
    pub grads: Gradients,
}

fn ctc_term(
    g: &mut Graph,
    logits: NodeId,
    target: &[usize],
    pass: &str,
) -> Result<(NodeId, LogProbLattice), TrainingError> {
    let lattice = LogProbLattice::from_logits(g.value(logits))?;
    let out = ctc_loss(&lattice, target)?;
    if !out.nll.is_finite() {
        return Err(NumericsError::NonFinite(format!("{pass} CTC loss {}", out.nll)).into());
    }
    Ok((g.loss(logits, out.nll, out.grad)?, lattice))
}

/// `L_dec + λ₁·L_ctc1 + λ₂·L_ctc2` for one utterance.
///
/// The first pass yields the CTC lattice; its Viterbi alignment against the
/// target fixes the token spans the extractor pools over (gradients still
/// flow through the pooled first-pass frames). The second pass shares the
/// CTC head, and its token rows feed the cross-entropy head.
pub fn joint_loss(
    model: &Model,
    features: &Tensor,
    target: &[usize],
    weights: &LossWeights,
    mut dropout: Option<&mut Dropout>,
) -> Result<JointLoss, TrainingError> {
    let mut g = Graph::new(model.params());
    let hidden = model.frontend_graph(&mut g, features)?;
    let pass1 = model.encode_graph(&mut g, hidden, None, false, dropout.as_deref_mut())?;
    let z1 = model.ctc_logits_graph(&mut g, pass1.frame_out)?;
    let (l1, lattice1) = ctc_term(&mut g, z1, target, "first-pass")?;

    let alignment = viterbi_align(&lattice1, target)?;
    let bounds = segment_boundaries(&alignment)?;
    let (_, tae) = model.extract_tae_graph(&mut g, pass1.frame_out, &bounds)?;
    let pass2 = model.encode_graph(&mut g, hidden, Some(tae), false, dropout)?;
    let z2 = model.ctc_logits_graph(&mut g, pass2.frame_out)?;
    let (l2, _) = ctc_term(&mut g, z2, target, "second-pass")?;

    let token_out = pass2.token_out.expect("target is non-empty");
    let ce_logits = model.ce_logits_graph(&mut g, token_out)?;
    let classes: Vec<usize> = target.iter().map(|&y| y - 1).collect();
    let ld = g.cross_entropy(ce_logits, &classes, weights.label_smoothing)?;

    let total = g.weighted_sum(&[(ld, 1.0), (l1, weights.lambda1), (l2, weights.lambda2)])?;
    let grads = g.backward(total)?;
    Ok(JointLoss {
        total: g.value(total).item(),
        l_dec: g.value(ld).item(),
        l_ctc1: g.value(l1).item(),
        l_ctc2: g.value(l2).item(),
        grads,
    })
}
