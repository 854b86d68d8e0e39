"""Download MNIST into the permfilter data cache and verify checksums.

Tries the usual gzip mirrors first, then the ``mnist-data`` npm tarball,
which ships the four uncompressed IDX files. Nothing is vendored in the repo.

    python scripts/fetch_mnist.py [--data-dir DIR]
"""

import argparse
import gzip
import hashlib
import io
import sys
import tarfile
import urllib.request

from permfilter.io import MNIST_SHA256, mnist_dir

GZ_MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
NPM_TARBALL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"


def sha256(blob):
    return hashlib.sha256(blob).hexdigest()


def fetch(url, timeout):
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def from_mirrors(name, timeout):
    for base in GZ_MIRRORS:
        try:
            blob = gzip.decompress(fetch(base + name + ".gz", timeout))
        except Exception as exc:  # noqa: BLE001 - any failure means "try the next source"
            print(f"  {base}: {exc}", file=sys.stderr)
            continue
        if sha256(blob) == MNIST_SHA256[name]:
            return blob
        print(f"  {base}: checksum mismatch", file=sys.stderr)
    return None


def from_npm(timeout):
    blob = fetch(NPM_TARBALL, timeout)
    out = {}
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = member.name.rsplit("/", 1)[-1]
            if name in MNIST_SHA256:
                out[name] = tar.extractfile(member).read()
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", help="cache root (default: $PERMFILTER_DATA_DIR or ~/.cache/permfilter)")
    ap.add_argument("--timeout", type=float, default=20.0)
    args = ap.parse_args(argv)

    target = mnist_dir(args.data_dir)
    target.mkdir(parents=True, exist_ok=True)
    todo = [n for n in MNIST_SHA256 if not ((target / n).exists() and sha256((target / n).read_bytes()) == MNIST_SHA256[n])]
    if not todo:
        print(f"MNIST already present in {target}")
        return 0

    npm = None
    for name in todo:
        print(f"fetching {name}")
        blob = from_mirrors(name, args.timeout)
        if blob is None:
            if npm is None:
                print("  falling back to npm tarball", file=sys.stderr)
                npm = from_npm(args.timeout * 6)
            blob = npm.get(name)
        if blob is None or sha256(blob) != MNIST_SHA256[name]:
            print(f"could not obtain a verified copy of {name}", file=sys.stderr)
            return 2
        (target / name).write_bytes(blob)
    print(f"MNIST ready in {target}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
