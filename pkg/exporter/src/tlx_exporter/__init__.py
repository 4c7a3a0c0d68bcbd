"""Training and export side of the portable weight-bundle toolchain.

This package owns the model-producing half of the workflow: it trains a
small 1D residual network on synthetic ECG corpora, exports the trained
weights as a self-describing binary bundle, and dumps forward-pass
fixtures (inputs, tapped activations, outputs) that the consuming
package can replay without any deep-learning framework installed.

The bundle and record formats are reimplemented here from their byte
layout on purpose: two independent implementations reading and writing
the same files is what makes the parity fixtures meaningful.
"""

from .formats import read_ecg, sha256_of_bytes, write_bundle
from .model import ResNet1d, arch_spec
from .train import TrainingError, load_corpus, train_toy
from .export import export_bundle, dump_fixtures, verify_manifest

__all__ = [
    "ResNet1d",
    "TrainingError",
    "arch_spec",
    "dump_fixtures",
    "export_bundle",
    "load_corpus",
    "read_ecg",
    "sha256_of_bytes",
    "train_toy",
    "verify_manifest",
    "write_bundle",
]
