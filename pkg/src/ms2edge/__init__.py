"""Spiking multi-scale edge detection with integer-valued LIF neurons."""
from .network import MS2Edge, NetworkSpec, EdgeMap, build, load_checkpoint, save_checkpoint
from .neuron import NeuronConfig, fire

__all__ = ["MS2Edge", "NetworkSpec", "EdgeMap", "NeuronConfig", "build", "fire",
           "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
