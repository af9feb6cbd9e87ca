from importlib import import_module
import math
from pathlib import Path
from pkgutil import iter_modules
from tempfile import NamedTemporaryFile
from typing import Any, Callable, Generic, Iterable, TypeVar

T = TypeVar("T")


class Example(Generic[T]):
    def __init__(
            self,
            result: T | None = None,
            input_str: str | None = None,
            raises: type[BaseException] | None = None,
            skip: bool = False,
            **kwargs
    ):
        self.result: T | None = result
        self.input_str: str | None = input_str
        self.raises: type[BaseException] | None = raises
        self.skip: bool = skip
        self.kwargs: dict[str, Any] = kwargs

    def describe(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.kwargs.items())
        if self.input_str is not None:
            args = f"<file>, {args}" if args else "<file>"
        return f"({args})"


def _matches(expected: Any, actual: Any) -> bool:
    if isinstance(expected, float) or isinstance(actual, float):
        if not isinstance(expected, (int, float)) or not isinstance(actual, (int, float)):
            return False
        if math.isinf(expected) or math.isinf(actual):
            return expected == actual
        return math.isclose(expected, actual, rel_tol=1e-9, abs_tol=1e-9)
    if isinstance(expected, (tuple, list)) and isinstance(actual, (tuple, list)):
        return len(expected) == len(actual) and all(_matches(e, a) for e, a in zip(expected, actual))
    return expected == actual


class Operation(Generic[T]):
    def __init__(self, module: str, func: Callable[..., T], examples: Iterable[Example[T]] = ()):
        self.module: str = module
        self.func: Callable[..., T] = func
        self.examples: list[Example[T]] = list(examples)
        self.__name__ = func.__name__
        self.__doc__ = func.__doc__
        self.__wrapped__ = func

    def __call__(self, *args, **kwargs) -> T:
        return self.func(*args, **kwargs)

    def _invoke(self, example: Example[T]) -> T:
        if example.input_str is None:
            return self.func(**example.kwargs)
        tmpfile = NamedTemporaryFile("w", delete=False, encoding="utf-8")
        try:
            tmpfile.write(example.input_str)
            tmpfile.close()
            return self.func(Path(tmpfile.name), **example.kwargs)
        finally:
            Path(tmpfile.name).unlink()

    def validate(self, example: Example[T]):
        if example.raises is not None:
            try:
                result = self._invoke(example)
            except example.raises:
                return
            raise ValueError(f"{self.module} {self.__name__}{example.describe()}: expected "
                             f"{example.raises.__name__} but got {result!r}")
        result = self._invoke(example)
        if not _matches(example.result, result):
            raise ValueError(f"{self.module} {self.__name__}{example.describe()}: "
                             f"expected {example.result!r} but got {result!r}")

    def validate_examples(self):
        for e in self.examples:
            if not e.skip:
                self.validate(e)

    def __str__(self):
        return self.__name__


OPERATIONS: dict[str, dict[str, Operation[Any]]] = {}


def operation(module: str):
    existing = OPERATIONS.setdefault(module, {})

    def wrapper(func: Callable[..., T]) -> Operation[T]:
        if func.__name__ in existing:
            raise ValueError(f"{module} already registers an operation named {func.__name__}")
        op = Operation(module=module, func=func)
        existing[func.__name__] = op
        return op

    return wrapper


def example(
        result: T | None = None,
        input_str: str | None = None,
        raises: type[BaseException] | None = None,
        skip: bool = False,
        **kwargs
) -> Callable[[Operation[T]], Operation[T]]:
    def wrapper(func: Operation[T]) -> Operation[T]:
        if not isinstance(func, Operation):
            raise TypeError(f"@example can only be used on an Operation "
                            f"or a function annotated with @operation, not {func!r}")
        func.examples = [
            Example(result=result, input_str=input_str, raises=raises, skip=skip, **kwargs)
        ] + func.examples
        return func

    return wrapper


# Automatically load all modules in the `hoptrace` package so the registry is complete
package_dir = Path(__file__).resolve().parent
for (_, module_name, _) in iter_modules([str(package_dir)]):  # type: ignore
    if module_name != "__main__":
        module = import_module(f"{__name__}.{module_name}")
