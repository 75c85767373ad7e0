import numpy as np


class Tensor:
    """A named dense array with an optional gradient buffer.

    Used for trainable parameters and persistent buffers. Activations flowing
    between layers are plain ``np.ndarray`` objects.
    """

    def __init__(self, data, name="", requires_grad=True):
        self.data = np.ascontiguousarray(data)
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise ValueError(f"{self.name}: grad shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"
