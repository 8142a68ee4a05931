#!/usr/bin/env -S python -W ignore

import subprocess
import sys
import tempfile
from pathlib import Path


def run_command(cmd: list[str]) -> None:
    print(f"Running command: {' '.join(cmd)}")
    subprocess.run(cmd, check=True)


def lint() -> None:
    """Run linters."""
    run_command(["black", "."])
    run_command(["isort", "."])
    run_command(["mypy", "src"])
    run_command(["ruff", "check", ".", "--fix"])
    run_command(["pylint", "--errors-only", "--disable=import-error", "src", "tests"])


def check() -> None:
    """Run all checks without modifying files."""
    run_command(["black", "--check", "."])
    run_command(["isort", "--check", "."])
    run_command(["mypy", "src"])
    run_command(["ruff", "check", "."])


def test() -> None:
    """Run tests."""
    run_command(["pytest"])


def smoke() -> None:
    """One warm-up and one training iteration, its report and the theory checks in a scratch directory."""
    with tempfile.TemporaryDirectory() as out:
        cli = [sys.executable, "-m", "aepolab.cli"]
        tiny = ["--batch-size", "4", "--group-size", "4", "--max-len", "8", "--task-knobs", "1,2"]
        run_command([*cli, "train", "--out", out, "--warmup-iterations", "1", "--iterations", "1", *tiny])
        run_command([*cli, "report", "--out", out])
        run_command([*cli, "theory", "--out", out])


def bump_version(part: str = "patch") -> str:
    """Bump ``project.version`` in pyproject.toml; ``part`` is major, minor or patch."""
    import tomlkit

    pyproject_path = Path("pyproject.toml")
    pyproject = tomlkit.parse(pyproject_path.read_text())
    major, minor, patch = map(int, str(pyproject["project"]["version"]).split("."))
    if part == "major":
        major, minor, patch = major + 1, 0, 0
    elif part == "minor":
        minor, patch = minor + 1, 0
    else:
        patch += 1
    new_version = f"{major}.{minor}.{patch}"
    pyproject["project"]["version"] = new_version
    pyproject_path.write_text(tomlkit.dumps(pyproject))
    return new_version


def release(version_type: str = "patch") -> None:
    """Check, test, bump, build and tag. Publishing stays manual."""
    try:
        check()
        test()
        new_version = bump_version(version_type)
        print(f"Bumped version to {new_version}")
        run_command(["poetry", "build"])
        run_command(["git", "add", "pyproject.toml"])
        run_command(["git", "commit", "-m", f"Bump version to {new_version}"])
        run_command(["git", "tag", f"v{new_version}"])
        print(f"Built and tagged aepolab {new_version}")
    except subprocess.CalledProcessError as e:
        print(f"Error during release: {e}")
        sys.exit(1)


OPERATIONS = {"lint": lint, "check": check, "test": test, "smoke": smoke}


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(f"Please specify operation: {', '.join([*OPERATIONS, 'release'])}")
        sys.exit(1)

    operation = sys.argv[1]
    if operation in OPERATIONS:
        OPERATIONS[operation]()
    elif operation == "release":
        release(sys.argv[2] if len(sys.argv) > 2 else "patch")
    else:
        print(f"Unknown operation. Supported operations: {', '.join([*OPERATIONS, 'release'])}")
        sys.exit(1)
