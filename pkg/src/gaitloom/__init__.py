"""gaitloom: sEMG-to-knee-angle prediction with gait-cycle-aware learning.

Pipeline stages: signal preprocessing (sigproc), gait segmentation and
kinematic decoupling (gait), muscle activation masks (activation), window
dataset construction and the synthetic oracle (dataset), a minimal reverse-
mode tensor kernel (autodiff), the multi-task model with training/metrics/
ablation (model), and a streaming inference simulator (stream).
"""

__version__ = "0.1.0"
