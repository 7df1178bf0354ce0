import hashlib
import json
from pathlib import Path


def canonical_json(data):
    """
    Returns a deterministic JSON string (sorted keys, no whitespace) for hashing and byte-stable files
    """
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def content_hash(data):
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def tree_hash(root, exclude=()):
    """
    Hashes every file below root (relative path + content), skipping any file name listed in exclude
    """
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob('*') if p.is_file() and p.name not in exclude):
        digest.update(str(path.relative_to(root)).encode('utf-8'))
        digest.update(file_hash(path).encode('ascii'))
    return digest.hexdigest()
