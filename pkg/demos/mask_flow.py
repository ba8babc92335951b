"""Show which output positions move when one input token is changed."""

import numpy as np

from labelsup.model import DecoderStack, ModelConfig

tokens = np.array([[2, 40, 41, 42, 43, 44]])
for mode in ("causal", "unmasked"):
    dec = DecoderStack(ModelConfig(mask_mode=mode), seed=0)
    ref = dec(tokens).data[0]
    print(f"{mode}: rows = perturbed position, columns = output position (x = changed)")
    for j in range(tokens.shape[1]):
        x = tokens.copy()
        x[0, j] += 100
        out = dec(x).data[0]
        print(f"  {j}  " + " ".join("x" if not np.array_equal(out[i], ref[i]) else "." for i in range(len(ref))))
