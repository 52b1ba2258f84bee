"""Segmentation bottleneck built on vector quantization and optimal-transport
pooling of discrete codes onto learnable references."""

from .autodiff import (Parameter, Rng, Tensor, grad_check, matmul, no_grad,
                       pairwise_sqdist)
from .sinkhorn import (OtProblem, TransportPlan, entropy, sinkhorn_solve,
                       transport_cost, uniform_marginals)
from .quantizer import Codebook, QuantizeResult, codebook_usage, quantize
from .mapper import (NystromEmbedding, ReferenceSet, embed_multi_ref,
                     embed_single_ref, init_references, nystrom_embed,
                     ot_align, position_weights)
from .model import (ModelConfig, SegModel, SgdMomentum, load_checkpoint,
                    save_checkpoint, seg_loss, train)
from .data import SegDataset, SegSample, gen_synthetic, load_dataset, save_dataset
from .metrics import MetricReport, dice, evaluate_dataset, hausdorff

__version__ = "0.1.0"
