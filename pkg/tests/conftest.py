"""Shared fixtures: the reference manifest, archive builders, handler sources."""

from __future__ import annotations

import io
import zipfile

import pytest

# Reference manifest used across the suite: two handler files, one function
# with typed params returning text, one mixing a file part with a param and
# returning a file, all three package managers populated, and a sidecar
# command.
EXAMPLE_MANIFEST = """\
name: test
version: v1
environment: ROS
files:
- file_name: client.py
  functions:
  - name: add_two_ints
    arguments:
      params:
        a: integer
        b: integer
    http-method: post
    returns: string
- file_name: testfiles.py
  functions:
  - name: sendmyfile
    arguments:
      files:
        fa:
      params:
        a: integer
    http-method: post
    returns: file
packages:
apt-get: net-tools vim
pip: numpy
npm: underscore
command: roslaunch test launch.launch
"""

ADD_TWO_INTS_SRC = """\
def add_two_ints(a, b):
    return a + b
"""

SENDMYFILE_SRC = """\
def sendmyfile(fa, a):
    # echo the uploaded file back
    return fa
"""


def build_archive(manifest_text: str, files: dict[str, str | bytes],
                  manifest_name: str = "srca.yaml") -> bytes:
    """Assemble an in-memory upload archive."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(manifest_name, manifest_text)
        for name, content in files.items():
            zf.writestr(name, content)
    return buf.getvalue()


# Same package, but with a sidecar command that actually runs on the test
# host (the reference command's launcher binary does not exist here).
DEPLOYABLE_MANIFEST = EXAMPLE_MANIFEST.replace(
    "command: roslaunch test launch.launch", "command: sleep 1000")


def build_deployable_archive(manifest_text: str = DEPLOYABLE_MANIFEST) -> bytes:
    return build_archive(manifest_text, {
        "functions/client.py": ADD_TWO_INTS_SRC,
        "functions/testfiles.py": SENDMYFILE_SRC,
    })


@pytest.fixture
def example_manifest_text() -> str:
    return EXAMPLE_MANIFEST


@pytest.fixture
def example_archive() -> bytes:
    return build_archive(EXAMPLE_MANIFEST, {
        "functions/client.py": ADD_TWO_INTS_SRC,
        "functions/testfiles.py": SENDMYFILE_SRC,
    })
