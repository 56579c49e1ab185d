"""Self-supervised representation learning on incomplete measurement grids.

Subpackages and modules:
  autodiff   float64 tensor engine with taped reverse-mode differentiation
  masking    intrinsic/augmented mask algebra, policies, batch padding
  model      encoder-decoder transformer with mask/pad/CLS tokens
  objective  dual reconstruction loss, binary cross-entropy
  pipeline   event ingestion, daily grids, normalization, splits, synthesis
  trainer    AdamW, cosine schedule, pretraining and fine-tuning loops
  evaluate   AUROC/AUPRC, regression metrics, linear probe, reconstruction
  cli        command-line entry point
"""

__version__ = "0.1.0"
