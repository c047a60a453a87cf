from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    # -ffp-contract=off keeps the compiled kernel bit-identical to the
    # pure-Python fallback (no FMA contraction of a*b+c).
    ext_modules = cythonize(
        [
            Extension(
                "contactworld._splat_cy",
                ["src/contactworld/_splat_cy.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                optional=True,
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
