"""Hand-written NumPy forward pass of the 2-layer oracle net used in test_nn.cpp.

conv 3x3 (2 filters, stride 1, zero pad 1) -> relu -> fc(3), on one 4x4 input.
Cross-correlation, weights laid out [out, in, ky, kx] and [out, in].
"""
import numpy as np

x = (np.arange(16, dtype=np.float64).reshape(4, 4)) / 8.0 - 1.0
w1 = np.array([0.1 * k - 0.4 for k in range(18)]).reshape(2, 1, 3, 3)
b1 = np.array([0.05, -0.1])
xp = np.pad(x, 1)
h = np.zeros((2, 4, 4))
for o in range(2):
    for y in range(4):
        for xx in range(4):
            h[o, y, xx] = np.sum(xp[y:y + 3, xx:xx + 3] * w1[o, 0]) + b1[o]
h = np.maximum(h, 0)
w2 = np.array([[0.01 * ((j * 32 + i) % 7) - 0.03 for i in range(32)] for j in range(3)])
b2 = np.array([0.1, 0.0, -0.1])
logits = w2 @ h.reshape(-1) + b2
print(", ".join(f"{v:.15g}" for v in logits))
