"""Show how the attention window shapes the weights of one head.

    python3 demos/local_attention.py

Prints the attention weights of a randomly initialised head for several
window sizes.  Entries outside the window are exactly zero.  With a window at
least as long as the sequence the head attends everywhere.
"""

import numpy as np

from prosody_tts.attention import attention_weights, init_local_attention
from prosody_tts.tensor import Tensor


def main():
    rng = np.random.default_rng(0)
    h = Tensor(rng.standard_normal((8, 16)))
    np.set_printoptions(precision=2, suppress=True, linewidth=120)
    for window in (0, 1, 3, 8):
        params = init_local_attention(np.random.default_rng(1), 16, 2, window)
        w = attention_weights(h, params)[0]
        print(f"window T={window}: {int((w > 0).sum())} non-zero weights of {w.size}")
        print(w)
        print()


if __name__ == "__main__":
    main()
