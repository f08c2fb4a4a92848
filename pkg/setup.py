#!/usr/bin/env python3
"""
Development bootstrap for deformreg: installs the stack, checks the geometry
packages import, prepares .env and a starter run configuration.
"""
import importlib.util
import json
import subprocess
import sys
from pathlib import Path

GEOMETRY_MODULES = ('numpy', 'scipy', 'trimesh', 'rtree', 'cv2', 'skimage', 'PIL')

STARTER_CONFIG = {
    'paths': {
        'canonical_mesh': 'data/canonical.ply',
        'corpus_dir': 'data/corpus',
        'masks_dir': 'data/sequence',
        'output_dir': 'output',
    },
    'shape_model': {'components': 10},
    'optimizer': {'popsize': 15, 'maxiter': 100},
    'seed': 0,
}


def run_step(command, description):
    """Run one shell step; report and return whether it succeeded."""
    print(f"\n🔄 {description}...")
    result = subprocess.run(command, shell=True, capture_output=True, text=True)
    if result.returncode != 0:
        print(f"❌ {description} failed:\n{result.stderr.strip()}")
        return False
    print(f"✅ {description}")
    return True


def check_python():
    if sys.version_info < (3, 9):
        print("❌ Python 3.9+ is required")
        return False
    print(f"✅ Python {sys.version.split()[0]}")
    return True


def check_geometry_stack():
    missing = [name for name in GEOMETRY_MODULES if importlib.util.find_spec(name) is None]
    if missing:
        print(f"❌ Missing modules after install: {', '.join(missing)}")
        return False
    print("✅ Geometry and imaging packages importable")
    return True


def check_broker():
    # Only worker mode needs a broker; eager mode runs tasks in-process.
    if subprocess.run("redis-cli ping", shell=True, capture_output=True).returncode == 0:
        print("✅ Redis reachable; set CELERY_TASK_ALWAYS_EAGER=False to use workers")
    else:
        print("⚠️  Redis not reachable; tasks will run in-process")


def prepare_workspace():
    if not Path('.env').exists() and Path('env.example').exists():
        Path('.env').write_text(Path('env.example').read_text())
        print("📝 Created .env from env.example")

    for directory in ('logs', 'output', 'data/corpus', 'data/sequence'):
        Path(directory).mkdir(parents=True, exist_ok=True)

    run_config = Path('run.json')
    if not run_config.exists():
        run_config.write_text(json.dumps(STARTER_CONFIG, indent=2) + '\n')
        print("📝 Wrote starter run.json (omitted keys take their defaults)")


def main():
    print("🚀 Setting up deformreg")
    if not check_python():
        sys.exit(1)
    if not run_step(f"{sys.executable} -m pip install -r requirements.txt", "Installing requirements"):
        sys.exit(1)
    if not check_geometry_stack():
        sys.exit(1)
    check_broker()
    prepare_workspace()
    if not run_step(f"{sys.executable} manage.py check", "Checking project configuration"):
        sys.exit(1)

    print("\n📋 Next steps:")
    print("1. Put the canonical mesh and corpus under data/ and edit run.json")
    print("2. python manage.py build_model --config run.json")
    print("3. python manage.py gen_data --config run.json")
    print("4. python manage.py test --exclude-tag slow")


if __name__ == "__main__":
    main()
