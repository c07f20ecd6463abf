/** Error hierarchy for the binding layer.
 *
 * Everything thrown on purpose derives from {@link BindingError}, so a
 * host can catch one type. Failures reported by the primary process
 * keep its error text verbatim.
 */

/** Base class for every error raised by this package. */
export class BindingError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** The primary rejected the request (bad parameter, shape, or file). */
export class ValidationError extends BindingError {}

/** The primary accepted the request but failed while running it. */
export class ExecutionError extends BindingError {}

/** A tensor byte stream violated the binary format. */
export class TensorFormatError extends BindingError {}

/** A handle was used (or released) after its release. */
export class ReleasedHandleError extends BindingError {}
