"""Desk-scale GAN training with a contrastive-representation discriminator."""

from . import (augment, checkpoint, config, data, evaluation, losses, nets,
               sampler, trainer)

__all__ = ["augment", "checkpoint", "config", "data", "evaluation", "losses",
           "nets", "sampler", "trainer"]
__version__ = "0.1.0"
