"""Minimal numpy autograd kernel: tensors, conv/LSTM layers, optimizers, checkpoints."""
from flowpix.nn.tensor import GraphError, Parameter, Tensor, backward, no_grad
from flowpix.nn.layers import LstmState, lstm_step

__all__ = ["GraphError", "LstmState", "Parameter", "Tensor", "backward", "lstm_step", "no_grad"]
