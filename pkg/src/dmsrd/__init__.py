"""Lifelong multi-strategy reward distillation (DMSRD) at desk scale.

Submodules: ``envsim`` (environments and rollouts), ``diffcore`` (small
reverse-mode autodiff and MLPs), ``policy`` (Gaussian policies, BC and PPO),
``rewardlearn`` (AIRL, MSRD and BCD losses), ``mixture`` (policy mixtures and
k-NN KL), ``lifelong`` (the ingestion loop and registry), ``demogen``
(scripted demonstrations), ``evalkit`` (metrics and reports) and ``cli``.
"""

__version__ = "0.1.0"
