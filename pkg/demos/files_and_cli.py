"""
Files and the command line
==========================

Tensors and label tables have small binary formats; the ``panodiff``
command wires the library into runnable steps.
"""

import tempfile
from pathlib import Path

import numpy as np

from panodiff.cli import main
from panodiff.formats import decode_tensor, encode_tensor, load_tensor

a = np.arange(6, dtype=np.float32).reshape(2, 3)
buf = encode_tensor(a)
print("tensor file bytes:", len(buf), "header", buf[:4], "round trip exact:",
      decode_tensor(buf).tobytes() == a.tobytes())

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    main(["synth-data", "--count", "2", "--out", str(out / "ds")])
    main(["rotate", str(out / "ds" / "pano_0000.sdtf"), "--yaw", "90", "--out", str(out / "rot.sdtf")])
    main(["generate", "--k-rot", "4", "--n", "50", "--out", str(out / "gen")])
    main(["seam", str(out / "gen" / "image.sdtf")])
    print("generated", load_tensor(out / "gen" / "image.sdtf").shape)
    print("rotation events:", [l for l in (out / "gen" / "steps.csv").read_text().splitlines()
                               if l.split(",")[1] == "1"])
