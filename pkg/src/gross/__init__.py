"""Group-size series decomposition of convolutional layers.

A convolution is factorised by block term decomposition into a
pointwise -> grouped -> pointwise bottleneck. Decompositions at a chain of
group sizes are stored as a base plus increments, so one set of weights
yields the bottleneck at any group size in the chain. The package covers
the decomposition, a small numpy training runtime, MAC accounting and
configuration search under a MAC budget.
"""

from .btd import BlockTermDecomposition, DecomposeOptions, RankPair, decompose, reconstruct
from .cost import network_macs
from .network import Network, NetworkSpec, four_layer_spec, vgg16_cifar_spec
from .search import breadth_first_search, exhaustive_search, topk_average_precision
from .series import ConvMeta, GroSSLayer, assemble, build_series, psi_expand

__version__ = "0.1.0"
